"""Caption metrics: corpus BLEU, CIDEr, ROUGE-L, exact-match METEOR and perplexity.

Variants, as labelled in every report:

- BLEU: corpus-level, clipped n-gram precision pooled over instances,
  brevity penalty from closest reference lengths, no smoothing.
- CIDEr: plain CIDEr (no CIDEr-D length penalty or count clipping), IDF
  over the reference sets of the corpus being scored.
- ROUGE-L: LCS F-measure with beta = 1.2, best reference per instance.
- METEOR (simplified): exact token matches only, no stemming or synonyms;
  the alignment maximizes matches then minimizes chunks.

Candidate files hold one JSON object per line, either
``{"image_id": ..., "caption": "..."}`` or the caption-record shape
``{"image_id": ..., "captions": [{"caption": "...", ...}, ...]}`` (the first,
best, caption is scored). Reference files hold
``{"image_id": ..., "references": ["...", ...]}``; dataset files
(``{"id": ..., "captions": [...]}``) are accepted as references too.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, DataFormatError, TrainingDiverged
from .model import forward_caption
from .vocab import tokenize

VARIANTS = {
    "bleu": "corpus BLEU-1..4, unsmoothed",
    "cider": "CIDEr (plain, no length penalty), corpus IDF",
    "rouge_l": "ROUGE-L F (beta=1.2)",
    "meteor": "METEOR simplified (exact match only, alpha=0.9 F-mean, 0.5*(ch/m)^3 penalty)",
}
ROUGE_BETA = 1.2
METEOR_EXACT_LIMIT = 12


@dataclass
class EvalInstance:
    image_id: str
    candidate: list
    references: list

    def __post_init__(self):
        if not self.references:
            raise ContractViolation(f"instance {self.image_id} has no references")


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c, refs):
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu(instances, n=4):
    """Corpus BLEU-n."""
    if not 1 <= n <= 4:
        raise ContractViolation("BLEU order must lie in 1..4")
    clipped, total = [0] * n, [0] * n
    c_len = r_len = 0
    for inst in instances:
        cand = inst.candidate
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), inst.references)
        for m in range(1, n + 1):
            counts = ngrams(cand, m)
            max_ref = Counter()
            for ref in inst.references:
                max_ref |= ngrams(ref, m)
            clipped[m - 1] += sum(min(cnt, max_ref[g]) for g, cnt in counts.items())
            total[m - 1] += max(len(cand) - m + 1, 0)
    if c_len == 0 or min(clipped) == 0:
        return 0.0
    log_p = sum(math.log(clipped[m] / total[m]) for m in range(n)) / n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def sentence_bleu(candidate, references, n=4):
    """Add-one smoothed (orders >= 2) sentence BLEU; diagnostics only."""
    if not candidate:
        return 0.0
    log_p = 0.0
    for m in range(1, n + 1):
        counts = ngrams(candidate, m)
        max_ref = Counter()
        for ref in references:
            max_ref |= ngrams(ref, m)
        hit = sum(min(cnt, max_ref[g]) for g, cnt in counts.items())
        tot = max(len(candidate) - m + 1, 0)
        if m > 1:
            hit, tot = hit + 1, tot + 1
        if hit == 0:
            return 0.0
        log_p += math.log(hit / tot)
    r = _closest_ref_len(len(candidate), references)
    bp = 1.0 if len(candidate) >= r else math.exp(1.0 - r / len(candidate))
    return bp * math.exp(log_p / n)


def _tfidf(tokens, m, idf):
    return {g: cnt * idf(g) for g, cnt in ngrams(tokens, m).items()}


def _cosine(a, b):
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_scores(instances, n=4):
    """Per-instance CIDEr (0..10 scale)."""
    n_docs = len(instances)
    df = Counter()
    for inst in instances:
        df.update({g for ref in inst.references for m in range(1, n + 1) for g in ngrams(ref, m)})

    def idf(g):
        return math.log(n_docs / max(1, df[g]))

    out = []
    for inst in instances:
        per_order = []
        for m in range(1, n + 1):
            cv = _tfidf(inst.candidate, m, idf)
            per_order.append(np.mean([_cosine(cv, _tfidf(r, m, idf)) for r in inst.references]))
        out.append(10.0 * float(np.mean(per_order)))
    return out


def cider(instances, n=4):
    scores = cider_scores(instances, n)
    return float(np.mean(scores)) if scores else 0.0


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(candidate, references, beta=ROUGE_BETA):
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        r, p = lcs / len(ref), lcs / len(candidate)
        best = max(best, (1 + beta ** 2) * r * p / (r + beta ** 2 * p))
    return best


def rouge_l(instances):
    if not instances:
        return 0.0
    return float(np.mean([rouge_l_single(i.candidate, i.references) for i in instances]))


def _align_exact(cand, ref):
    """(matches, chunks): maximum matching first, fewest chunks among those."""
    cand, ref = tuple(cand), tuple(ref)
    where = {}
    for j, tok in enumerate(ref):
        where.setdefault(tok, []).append(j)

    @lru_cache(maxsize=None)
    def best(i, used, prev):
        if i == len(cand):
            return (0, 0)
        m, ch = best(i + 1, used, -1)
        top = (m, -ch)
        for j in where.get(cand[i], ()):
            if used >> j & 1:
                continue
            m2, ch2 = best(i + 1, used | (1 << j), j)
            ch2 += 0 if (prev >= 0 and j == prev + 1) else 1
            top = max(top, (m2 + 1, -ch2))
        return (top[0], -top[1])

    return best(0, 0, -1)


def _align_greedy(cand, ref):
    used, prev, m, chunks = set(), -1, 0, 0
    for tok in cand:
        if prev >= 0 and prev + 1 < len(ref) and ref[prev + 1] == tok and prev + 1 not in used:
            j = prev + 1
        else:
            j = next((j for j, r in enumerate(ref) if r == tok and j not in used), None)
            if j is None:
                prev = -1
                continue
            chunks += 1
        used.add(j)
        m += 1
        prev = j
    return m, chunks


def meteor_alignment(cand, ref):
    """Exact search when both sides have at most 12 tokens, greedy left-to-right otherwise."""
    if len(cand) <= METEOR_EXACT_LIMIT and len(ref) <= METEOR_EXACT_LIMIT:
        return _align_exact(cand, ref)
    return _align_greedy(cand, ref)


def meteor_single(candidate, references):
    best = 0.0
    for ref in references:
        if not candidate or not ref:
            continue
        m, ch = meteor_alignment(candidate, ref)
        if m == 0:
            continue
        p, r = m / len(candidate), m / len(ref)
        f_mean = 10 * p * r / (r + 9 * p)
        best = max(best, f_mean * (1 - 0.5 * (ch / m) ** 3))
    return best


def meteor_simplified(instances):
    if not instances:
        return 0.0
    return float(np.mean([meteor_single(i.candidate, i.references) for i in instances]))


def perplexity(params, dataset, vocab):
    """exp(mean per-token negative log-likelihood) under teacher forcing."""
    total, count = 0.0, 0
    for ex in dataset:
        for cap in ex.captions:
            loss, cache = forward_caption(params, ex.features, vocab.encode(cap))
            total += loss
            count += cache.n_tokens
    if count == 0:
        raise ContractViolation("perplexity needs at least one caption")
    if not math.isfinite(total):
        raise TrainingDiverged("non-finite loss while computing perplexity")
    return math.exp(total / count)


@dataclass
class MetricReport:
    bleu: list  # BLEU-1..4
    cider: float
    rouge_l: float
    meteor: float
    count: int
    per_instance: list = field(default=None, repr=False)

    def to_dict(self):
        d = {
            "count": self.count,
            "BLEU-1": self.bleu[0], "BLEU-2": self.bleu[1],
            "BLEU-3": self.bleu[2], "BLEU-4": self.bleu[3],
            "CIDEr": self.cider, "ROUGE-L": self.rouge_l,
            "METEOR-simplified": self.meteor,
            "variants": VARIANTS,
        }
        if self.per_instance is not None:
            d["per_instance"] = self.per_instance
        return d

    def table(self):
        rows = [("BLEU-1", self.bleu[0]), ("BLEU-2", self.bleu[1]), ("BLEU-3", self.bleu[2]),
                ("BLEU-4", self.bleu[3]), ("CIDEr", self.cider), ("ROUGE-L", self.rouge_l),
                ("METEOR-simplified", self.meteor)]
        lines = [f"{'metric':<18}{'score':>10}", "-" * 28]
        lines += [f"{name:<18}{value:>10.4f}" for name, value in rows]
        lines.append(f"{'instances':<18}{self.count:>10d}")
        return "\n".join(lines)


def score_instances(instances, per_instance=False):
    if not instances:
        raise ContractViolation("nothing to evaluate")
    report = MetricReport(
        bleu=[bleu(instances, n) for n in range(1, 5)],
        cider=cider(instances),
        rouge_l=rouge_l(instances),
        meteor=meteor_simplified(instances),
        count=len(instances),
    )
    if per_instance:
        ciders = cider_scores(instances)
        report.per_instance = [
            {"image_id": inst.image_id, "CIDEr": c,
             "ROUGE-L": rouge_l_single(inst.candidate, inst.references),
             "METEOR-simplified": meteor_single(inst.candidate, inst.references),
             "BLEU-4-smoothed": sentence_bleu(inst.candidate, inst.references)}
            for inst, c in zip(instances, ciders)
        ]
    return report


def _read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(rec, dict):
                raise DataFormatError(f"{path}: expected a JSON object", line=lineno)
            yield lineno, rec


def read_candidates(path):
    """Ordered ``[(image_id, tokens)]``."""
    out, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        if "image_id" not in rec:
            raise DataFormatError(f"{path}: record lacks 'image_id'", line=lineno)
        iid = str(rec["image_id"])
        if "caption" in rec and isinstance(rec["caption"], str):
            text = rec["caption"]
        elif isinstance(rec.get("captions"), list) and rec["captions"]:
            first = rec["captions"][0]
            text = first.get("caption") if isinstance(first, dict) else first
            if not isinstance(text, str):
                raise DataFormatError(f"{path}: malformed n-best entry for {iid}", line=lineno, record_id=iid)
        else:
            raise DataFormatError(f"{path}: record {iid} has no caption", line=lineno, record_id=iid)
        if iid in seen:
            raise DataFormatError(f"{path}: duplicate image_id {iid}", line=lineno, record_id=iid)
        seen.add(iid)
        out.append((iid, tokenize(text)))
    if not out:
        raise DataFormatError(f"{path}: candidate file is empty")
    return out


def read_references(path):
    """``{image_id: [token lists]}``."""
    out = {}
    for lineno, rec in _read_jsonl(path):
        iid = rec.get("image_id", rec.get("id"))
        refs = rec.get("references", rec.get("captions"))
        if iid is None or not isinstance(refs, list) or not refs or not all(isinstance(r, str) for r in refs):
            raise DataFormatError(f"{path}: record needs an id and a non-empty list of reference strings", line=lineno)
        out[str(iid)] = [tokenize(r) for r in refs]
    if not out:
        raise DataFormatError(f"{path}: reference file is empty")
    return out


def instances_from(candidates, references):
    missing = [iid for iid, _ in candidates if iid not in references]
    if missing:
        raise DataFormatError(f"candidate image ids missing from references: {missing[:5]}")
    return [EvalInstance(iid, toks, references[iid]) for iid, toks in candidates]


def evaluate_corpus(candidates_path, references_path, per_instance=False):
    return score_instances(instances_from(read_candidates(candidates_path), read_references(references_path)),
                           per_instance=per_instance)
