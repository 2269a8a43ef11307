"""LSTM caption decoder: forward pass, loss and backpropagation through time.

The cell has no biases and no tanh on the cell output:

    i = sigmoid(W_ix x + W_im m_prev)
    f = sigmoid(W_fx x + W_fm m_prev)
    o = sigmoid(W_ox x + W_om m_prev)
    g = tanh(W_cx x + W_cm m_prev)
    c = f * c_prev + i * g
    m = o * c

The image enters once, as ``x = W_enc @ features`` on the first step from a
zero state. Every following step reads one word embedding (a column of W_e).
Word distributions are ``log_softmax(W_dec @ m)``.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ContractViolation
from .numerics import init_uniform, linear_map, log_softmax, sigmoid, tanh
from .vocab import START_ID, STOP_ID

GATE_NAMES = ("W_ix", "W_im", "W_fx", "W_fm", "W_ox", "W_om", "W_cx", "W_cm")
PARAM_NAMES = ("W_enc", "W_e") + GATE_NAMES + ("W_dec",)


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int
    embed_dim: int
    vocab_size: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ContractViolation(f"{f.name} must be >= 1, got {getattr(self, f.name)}")

    def shape_of(self, name):
        F, d, V = self.feature_dim, self.embed_dim, self.vocab_size
        if name == "W_enc":
            return (d, F)
        if name == "W_e":
            return (d, V)
        if name == "W_dec":
            return (V, d)
        return (d, d)


@dataclass
class ModelParams:
    """Every trainable matrix. Iterating ``items()`` yields them in a fixed order."""

    W_enc: np.ndarray
    W_e: np.ndarray
    W_ix: np.ndarray
    W_im: np.ndarray
    W_fx: np.ndarray
    W_fm: np.ndarray
    W_ox: np.ndarray
    W_om: np.ndarray
    W_cx: np.ndarray
    W_cm: np.ndarray
    W_dec: np.ndarray

    def __post_init__(self):
        dims = self.dims
        for name, w in self.items():
            if w.shape != dims.shape_of(name):
                raise ContractViolation(
                    f"{name} has shape {w.shape}, expected {dims.shape_of(name)} for {dims}"
                )

    @property
    def dims(self):
        d, F = self.W_enc.shape
        return ModelDims(feature_dim=F, embed_dim=d, vocab_size=self.W_e.shape[1])

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def copy(self):
        return ModelParams(**{n: w.copy() for n, w in self.items()})

    def astype(self, dtype):
        return ModelParams(**{n: w.astype(dtype) for n, w in self.items()})

    def zeros_like(self):
        return ModelParams(**{n: np.zeros_like(w) for n, w in self.items()})

    def equals(self, other):
        """Bitwise equality of every matrix."""
        return all(np.array_equal(w, getattr(other, n)) for n, w in self.items())

    @classmethod
    def zeros(cls, dims):
        return cls(**{n: np.zeros(dims.shape_of(n)) for n in PARAM_NAMES})

    @classmethod
    def init(cls, dims, rng, scale=None):
        return cls(**{n: init_uniform(*dims.shape_of(n), rng, scale=scale) for n in PARAM_NAMES})


@dataclass
class LstmState:
    m: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), np.zeros(d))


@dataclass
class StepCache:
    x: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    m_prev: np.ndarray
    c_prev: np.ndarray
    c: np.ndarray
    m: np.ndarray
    x_mask: np.ndarray = None
    out_mask: np.ndarray = None
    logits: np.ndarray = None
    logp: np.ndarray = None
    input_id: int = None  # None on the image step
    target: int = None  # None on the image step


@dataclass
class ForwardCache:
    features: np.ndarray
    steps: list = field(default_factory=list)
    loss: float = 0.0
    n_tokens: int = 0

    @property
    def input_ids(self):
        return [s.input_id for s in self.steps[1:]]


def encode_image(params, features):
    return linear_map(params.W_enc, features)


def embed_word(params, token_id):
    V = params.W_e.shape[1]
    if not 0 <= token_id < V:
        raise ContractViolation(f"token id {token_id} outside vocabulary of size {V}")
    return params.W_e[:, token_id].copy()


def lstm_step(params, x, prev):
    """Advance one step. Returns ``(LstmState, StepCache)``."""
    d = params.W_ix.shape[0]
    if x.shape != (d,) or prev.m.shape != (d,) or prev.c.shape != (d,):
        raise ContractViolation(
            f"lstm_step expects vectors of dim {d}, got x {x.shape}, m {prev.m.shape}, c {prev.c.shape}"
        )
    i = sigmoid(params.W_ix @ x + params.W_im @ prev.m)
    f = sigmoid(params.W_fx @ x + params.W_fm @ prev.m)
    o = sigmoid(params.W_ox @ x + params.W_om @ prev.m)
    g = tanh(params.W_cx @ x + params.W_cm @ prev.m)
    c = f * prev.c + i * g
    m = o * c
    cache = StepCache(x=x, i=i, f=f, o=o, g=g, m_prev=prev.m, c_prev=prev.c, c=c, m=m)
    return LstmState(m, c), cache


def output_distribution(params, m):
    return log_softmax(linear_map(params.W_dec, m))


def apply_dropout(v, rate, training, rng):
    """Inverted dropout. Returns ``(dropped, mask)``; the mask already holds the 1/(1-rate) scale."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return v, np.ones_like(v)
    mask = (rng.random(v.shape) >= rate) / (1.0 - rate)
    return v * mask, mask


def _check_tokens(tokens, V):
    if len(tokens) < 2 or tokens[0] != START_ID or tokens[-1] != STOP_ID:
        raise ContractViolation("token sequence must start with START, end with STOP and have length >= 2")
    if any(not 0 <= t < V for t in tokens):
        raise ContractViolation(f"token id outside vocabulary of size {V}")


def forward_caption(params, features, tokens, dropout_rate=0.0, training=False, rng=None,
                    sampling_prob=0.0, sample_fn=None):
    """Unrolled forward pass over one (image, caption) pair.

    Inputs:
    - tokens: START, w_1 ... w_{N-1}, STOP. The loss is the summed negative
      log-likelihood of tokens[1:], so STOP is predicted and START is not.
    - sampling_prob: scheduled-sampling probability. At every word input
      after START an independent coin decides whether the model's own
      prediction replaces the ground-truth previous word.
    - sample_fn: ``(logp, rng) -> id`` picking the replacement word from the
      previous step's distribution; required when sampling_prob > 0.

    Returns ``(loss, ForwardCache)``.
    """
    _check_tokens(tokens, params.W_e.shape[1])
    d = params.W_ix.shape[0]
    if (training and dropout_rate > 0) or sampling_prob > 0:
        if rng is None:
            raise ContractViolation("rng required for dropout or scheduled sampling")
    cache = ForwardCache(features=features)

    x, x_mask = apply_dropout(encode_image(params, features), dropout_rate, training, rng)
    state, step = lstm_step(params, x, LstmState.zeros(d))
    step.x_mask = x_mask
    cache.steps.append(step)

    loss = 0.0
    prev_logp = None
    for t in range(len(tokens) - 1):
        inp = tokens[t]
        if t > 0 and sampling_prob > 0 and rng.random() < sampling_prob:
            inp = sample_fn(prev_logp, rng)
        x, x_mask = apply_dropout(embed_word(params, inp), dropout_rate, training, rng)
        state, step = lstm_step(params, x, state)
        m_out, out_mask = apply_dropout(state.m, dropout_rate, training, rng)
        step.logits = params.W_dec @ m_out
        step.logp = log_softmax(step.logits)
        step.x_mask, step.out_mask = x_mask, out_mask
        step.input_id, step.target = inp, tokens[t + 1]
        loss -= step.logp[step.target]
        prev_logp = step.logp
        cache.steps.append(step)

    cache.loss = loss  # numpy scalar in the parameters' precision
    cache.n_tokens = len(tokens) - 1
    return cache.loss, cache


def backward_caption(params, cache, grads=None):
    """Exact gradient of ``cache.loss`` with respect to every matrix.

    Gradients are accumulated into ``grads`` if given (so several examples can
    be summed), otherwise into a fresh zero ModelParams which is returned.
    """
    if cache.features.shape != (params.W_enc.shape[1],):
        raise ContractViolation("cache does not match these parameters")
    if grads is None:
        grads = params.zeros_like()
    d = params.W_ix.shape[0]
    dm_next = np.zeros(d)
    dc_next = np.zeros(d)
    for s in reversed(cache.steps):
        dm = dm_next
        if s.target is not None:
            dlogits = np.exp(s.logp)
            dlogits[s.target] -= 1.0
            grads.W_dec += np.outer(dlogits, s.m * s.out_mask)
            dm = dm + (params.W_dec.T @ dlogits) * s.out_mask
        dc = dc_next + dm * s.o
        da_o = dm * s.c * s.o * (1.0 - s.o)
        da_i = dc * s.g * s.i * (1.0 - s.i)
        da_f = dc * s.c_prev * s.f * (1.0 - s.f)
        da_g = dc * s.i * (1.0 - s.g * s.g)
        dc_next = dc * s.f

        for gate, da in (("i", da_i), ("f", da_f), ("o", da_o), ("c", da_g)):
            getattr(grads, f"W_{gate}x")[...] += np.outer(da, s.x)
            getattr(grads, f"W_{gate}m")[...] += np.outer(da, s.m_prev)
        dx = params.W_ix.T @ da_i + params.W_fx.T @ da_f + params.W_ox.T @ da_o + params.W_cx.T @ da_g
        dm_next = params.W_im.T @ da_i + params.W_fm.T @ da_f + params.W_om.T @ da_o + params.W_cm.T @ da_g

        dx = dx * s.x_mask
        if s.input_id is None:
            grads.W_enc += np.outer(dx, cache.features)
        else:
            grads.W_e[:, s.input_id] += dx
    return grads
