"""Caption generation, scoring, ranking and embedding queries.

Every decoder takes a list of models (an ensemble; a single model is a list
of one). Members advance their own LSTM states and their word distributions
are averaged in probability space, or in log space with ``geometric=True``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .model import LstmState, encode_image, embed_word, lstm_step, output_distribution
from .numerics import log_softmax, sample_categorical, sigmoid
from .vocab import RESERVED, START_ID, STOP_ID


@dataclass
class Hypothesis:
    tokens: tuple  # word ids after START, STOP excluded
    log_prob: float
    states: list = field(default=None, repr=False)
    completed: bool = False


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "beam"
    beam_size: int = 3
    max_length: int = 20
    temperature: float = 1.0
    geometric: bool = False

    def __post_init__(self):
        if self.mode not in ("greedy", "sample", "beam"):
            raise ContractViolation(f"unknown decode mode {self.mode!r}")
        if self.beam_size < 1 or self.max_length < 1:
            raise ContractViolation("beam_size and max_length must be >= 1")
        if not self.temperature > 0:
            raise ContractViolation("temperature must be > 0")


def check_ensemble(models):
    if not models:
        raise ContractViolation("need at least one model")
    dims = models[0].dims
    for p in models[1:]:
        if p.dims != dims:
            raise ContractViolation(f"ensemble members disagree on dims: {dims} vs {p.dims}")
    return dims


def _combine(logps, geometric):
    if len(logps) == 1:
        return logps[0]
    if geometric:
        return log_softmax(np.mean(logps, axis=0))
    with np.errstate(divide="ignore"):
        return np.log(np.mean(np.exp(logps), axis=0))


def _advance(models, xs, states, geometric=False):
    new_states, logps = [], []
    for p, x, s in zip(models, xs, states):
        s2, _ = lstm_step(p, x, s)
        new_states.append(s2)
        logps.append(output_distribution(p, s2.m))
    return new_states, _combine(logps, geometric)


def ensemble_step(models, xs, states, geometric=False):
    """Advance every member one step on its own input ``xs[j]``.

    Returns ``(new_states, probs)`` with ``probs`` the member-averaged word
    distribution.
    """
    check_ensemble(models)
    if not len(models) == len(xs) == len(states):
        raise ContractViolation("need one input and one state per ensemble member")
    new_states, logp = _advance(models, xs, states, geometric)
    return new_states, np.exp(logp)


def _feed_word(models, token, states, geometric):
    return _advance(models, [embed_word(p, token) for p in models], states, geometric)


def _start(models, features, geometric):
    """Image step from zero state, then START. Returns states and log p(w_1)."""
    d = models[0].dims.embed_dim
    states = []
    for p in models:
        s, _ = lstm_step(p, encode_image(p, features), LstmState.zeros(d))
        states.append(s)
    return _feed_word(models, START_ID, states, geometric)


def decode_greedy(models, features, max_length=20, geometric=False):
    check_ensemble(models)
    states, logp = _start(models, features, geometric)
    tokens, score = [], 0.0
    for t in range(max_length):
        w = int(np.argmax(logp))
        score += logp[w]
        if w == STOP_ID:
            return Hypothesis(tuple(tokens), float(score), states, True)
        tokens.append(w)
        if t + 1 < max_length:
            states, logp = _feed_word(models, w, states, geometric)
    return Hypothesis(tuple(tokens), float(score), states, False)


def decode_sample(models, features, rng, max_length=20, temperature=1.0, geometric=False):
    """Draw each word from the tempered distribution p^(1/T). The recorded score is untempered."""
    check_ensemble(models)
    if not temperature > 0:
        raise ContractViolation("temperature must be > 0")
    states, logp = _start(models, features, geometric)
    tokens, score = [], 0.0
    for t in range(max_length):
        q = np.exp(log_softmax(logp / temperature))
        w = sample_categorical(q / q.sum(), rng)
        score += logp[w]
        if w == STOP_ID:
            return Hypothesis(tuple(tokens), float(score), states, True)
        tokens.append(w)
        if t + 1 < max_length:
            states, logp = _feed_word(models, w, states, geometric)
    return Hypothesis(tuple(tokens), float(score), states, False)


def beam_search(models, features, beam_size=3, max_length=20, geometric=False, trace=None):
    """Keep the ``beam_size`` best partial captions per step.

    Extensions of all live hypotheses are ranked by total log-probability
    (ties: higher last-word log-probability, then earlier hypothesis, then
    lower id). Walking that ranking, STOP extensions enter the completed
    pool and the first ``beam_size`` others become the next live set, so a
    finished caption never consumes beam width. The search ends when nothing
    is live, when ``beam_size`` completed captions exist and no live one can
    still beat the worst of them, or after ``max_length`` emitted tokens.

    Returns up to ``beam_size`` hypotheses, best first: the completed ones,
    or the live ones if none completed. ``trace``, if a list, receives the
    best live-or-completed score after each step.
    """
    check_ensemble(models)
    k = beam_size
    if k < 1:
        raise ContractViolation("beam_size must be >= 1")
    states, logp = _start(models, features, geometric)
    live = [(Hypothesis((), 0.0, states), logp)]
    completed = []
    for t in range(max_length):
        totals = np.stack([h.log_prob + lp for h, lp in live])  # (live, V)
        last = np.stack([lp for _, lp in live])
        n_live, V = totals.shape
        hyp_idx = np.repeat(np.arange(n_live), V)
        word = np.tile(np.arange(V), n_live)
        order = np.lexsort((word, hyp_idx, -last.ravel(), -totals.ravel()))

        chosen = []
        for j in order:
            if len(chosen) == k:
                break
            h, w, s = live[hyp_idx[j]][0], int(word[j]), float(totals.flat[j])
            if w == STOP_ID:
                completed.append(Hypothesis(h.tokens, s, h.states, True))
            else:
                chosen.append((h, w, s))
        completed.sort(key=lambda h: -h.log_prob)
        del completed[k:]

        if t + 1 == max_length:
            live = [(Hypothesis(h.tokens + (w,), s, h.states), None) for h, w, s in chosen]
        else:
            live = []
            for h, w, s in chosen:
                st, lp = _feed_word(models, w, h.states, geometric)
                live.append((Hypothesis(h.tokens + (w,), s, st), lp))
        if trace is not None:
            trace.append(max([h.log_prob for h, _ in live] + [h.log_prob for h in completed]))
        if not live:
            break
        best_live = max(h.log_prob for h, _ in live)
        if len(completed) >= k and best_live <= completed[-1].log_prob:
            break
    if completed:
        return completed
    return sorted((h for h, _ in live), key=lambda h: -h.log_prob)[:k]


def decode(models, features, config, rng=None):
    """Dispatch on ``config.mode``; always returns an n-best list."""
    if config.mode == "greedy":
        return [decode_greedy(models, features, config.max_length, config.geometric)]
    if config.mode == "sample":
        if rng is None:
            raise ContractViolation("sample mode needs an rng")
        return [decode_sample(models, features, rng, config.max_length, config.temperature, config.geometric)]
    return beam_search(models, features, config.beam_size, config.max_length, config.geometric)


def _check_caption(tokens, V):
    if len(tokens) < 2 or tokens[0] != START_ID or tokens[-1] != STOP_ID:
        raise ContractViolation("caption must start with START and end with STOP")
    if any(not 0 <= t < V for t in tokens):
        raise ContractViolation(f"token id outside vocabulary of size {V}")


def caption_log_prob(models, features, tokens, geometric=False):
    """Teacher-forced log p(S | I) summed over every token after START."""
    dims = check_ensemble(models)
    _check_caption(tokens, dims.vocab_size)
    states, logp = _start(models, features, geometric)
    total = 0.0
    for t in range(1, len(tokens)):
        total += logp[tokens[t]]
        if t + 1 < len(tokens):
            states, logp = _feed_word(models, tokens[t], states, geometric)
    return float(total)


def _batch_logps(p, features, ids, steps):
    """Log word distributions for a padded batch. Returns (steps, V, B)."""
    d = p.dims.embed_dim
    s, _ = lstm_step(p, encode_image(p, features), LstmState.zeros(d))
    B = ids.shape[1]
    m = np.repeat(s.m[:, None], B, axis=1)
    c = np.repeat(s.c[:, None], B, axis=1)
    out = []
    for t in range(steps):
        x = p.W_e[:, ids[t]]
        i = sigmoid(p.W_ix @ x + p.W_im @ m)
        f = sigmoid(p.W_fx @ x + p.W_fm @ m)
        o = sigmoid(p.W_ox @ x + p.W_om @ m)
        g = np.tanh(p.W_cx @ x + p.W_cm @ m)
        c = f * c + i * g
        m = o * c
        z = p.W_dec @ m
        z = z - z.max(axis=0)
        out.append(z - np.log(np.exp(z).sum(axis=0)))
    return np.stack(out)


def score_captions(models, features, captions, geometric=False):
    """Vectorized :func:`caption_log_prob` of many captions under one image."""
    dims = check_ensemble(models)
    for cap in captions:
        _check_caption(cap, dims.vocab_size)
    lengths = np.array([len(c) for c in captions])
    T = int(lengths.max()) - 1
    ids = np.full((T + 1, len(captions)), STOP_ID)
    for b, cap in enumerate(captions):
        ids[: len(cap), b] = cap
    logps = [_batch_logps(p, features, ids, T) for p in models]
    if len(logps) == 1:
        logp = logps[0]
    elif geometric:
        z = np.mean(logps, axis=0)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    else:
        logp = np.log(np.mean(np.exp(logps), axis=0))
    cols = np.arange(len(captions))
    scores = np.zeros(len(captions))
    for t in range(T):
        live = lengths > t + 1
        scores += np.where(live, logp[t, ids[t + 1], cols], 0.0)
    return scores


def score_matrix(models, images, captions, geometric=False):
    """``S[i, c]`` = log p(caption c | image i)."""
    return np.stack([score_captions(models, f, captions, geometric) for f in images])


@dataclass
class RankReport:
    recall: dict  # k -> fraction of queries with ground truth at rank <= k
    median_rank: float
    ranks: list

    def to_dict(self):
        return {"recall": {f"R@{k}": v for k, v in self.recall.items()},
                "median_rank": self.median_rank, "n_queries": len(self.ranks)}


def _rank_of(scores, targets):
    # Ties share the worst tied rank.
    return min(int(np.sum(scores >= scores[c])) for c in targets)


def _report(ranks, ks):
    ranks = np.asarray(ranks)
    return RankReport({k: float(np.mean(ranks <= k)) for k in ks}, float(np.median(ranks)), ranks.tolist())


def rank_captions(models, images, captions, caption_image, ks=(1, 5, 10), scores=None):
    """Rank every candidate caption for each image query.

    Scores are divided by the number of predicted tokens so captions of
    different lengths compete fairly. An image's rank is that of its best
    ranked ground-truth caption.
    """
    caption_image = np.asarray(caption_image)
    if scores is None:
        scores = score_matrix(models, images, captions)
    lengths = np.array([len(c) - 1 for c in captions])
    norm = scores / lengths
    ranks = []
    for i in range(len(images)):
        truth = np.flatnonzero(caption_image == i)
        if truth.size == 0:
            raise ContractViolation(f"image {i} has no ground-truth caption among the candidates")
        ranks.append(_rank_of(norm[i], truth))
    return _report(ranks, ks)


def rank_images(models, images, captions, caption_image, ks=(1, 5, 10), scores=None):
    """Rank every candidate image for each caption query."""
    if scores is None:
        scores = score_matrix(models, images, captions)
    ranks = []
    for c, i in enumerate(caption_image):
        if not 0 <= i < len(images):
            raise ContractViolation(f"caption {c} points at missing image {i}")
        ranks.append(_rank_of(scores[:, c], [i]))
    return _report(ranks, ks)


def novelty_rate(generated, training):
    """Fraction of generated token sequences that never occur verbatim in ``training``."""
    generated = [tuple(g) for g in generated]
    if not generated:
        return 0.0
    seen = {tuple(t) for t in training}
    return sum(g not in seen for g in generated) / len(generated)


def embedding_neighbors(params, vocab, query, n=5):
    """Top-``n`` words by cosine similarity of W_e columns. Returns ``[(token, sim)]``."""
    if query not in vocab or query in RESERVED:
        raise ContractViolation(f"query word {query!r} is not in the vocabulary")
    if n < 1:
        raise ContractViolation("n must be >= 1")
    E = params.W_e
    q = E[:, vocab.id(query)]
    norms = np.linalg.norm(E, axis=0)
    qn = np.linalg.norm(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where((norms > 0) & (qn > 0), (q @ E) / (norms * qn), 0.0)
    cand = [j for j in range(len(RESERVED), len(vocab)) if j != vocab.id(query)]
    cand.sort(key=lambda j: (-sims[j], j))
    return [(vocab.token(j), float(sims[j])) for j in cand[:n]]


def caption_records(models, examples, vocab, config, train_captions=None, rng=None):
    """One output record per image: id plus its n-best captions."""
    seen = None if train_captions is None else {tuple(c) for c in train_captions}
    records = []
    for ex in examples:
        nbest = decode(models, ex.features, config, rng)
        caps = []
        for h in nbest:
            words = vocab.decode(h.tokens)
            caps.append({
                "caption": " ".join(words),
                "log_prob": h.log_prob,
                "completed": h.completed,
                "novel": None if seen is None else tuple(words) not in seen,
            })
        records.append({"image_id": ex.id, "captions": caps})
    return records


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
