"""SGD training with teacher forcing, scheduled sampling and encoder freezing."""

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, TrainingDiverged
from .model import ModelDims, ModelParams, backward_caption, forward_caption
from .numerics import make_rng, sample_categorical, sgd_step

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("off", "linear", "exponential", "inverse_sigmoid")


@dataclass(frozen=True)
class SamplingSchedule:
    """Probability of feeding the model's own previous word, as a function of step.

    - linear:          eps = slope * step
    - exponential:     eps = 1 - decay ** step          (0 < decay < 1)
    - inverse_sigmoid: eps = 1 - k / (k + exp(step / k))  (k > 0)

    Every kind is then capped at ``cap`` and clamped to [0, 1].
    """

    kind: str = "off"
    slope: float = 1e-4
    decay: float = 0.999
    k: float = 100.0
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ContractViolation(f"schedule must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.cap <= 1.0:
            raise ContractViolation(f"schedule cap must lie in [0, 1], got {self.cap}")
        if self.kind == "linear" and self.slope < 0:
            raise ContractViolation("linear schedule slope must be >= 0")
        if self.kind == "exponential" and not 0.0 < self.decay < 1.0:
            raise ContractViolation("exponential schedule decay must lie in (0, 1)")
        if self.kind == "inverse_sigmoid" and not self.k > 0:
            raise ContractViolation("inverse_sigmoid schedule k must be > 0")


def sampling_prob(schedule, step):
    if step < 0:
        raise ContractViolation("step must be >= 0")
    if schedule.kind == "off":
        return 0.0
    if schedule.kind == "linear":
        eps = schedule.slope * step
    elif schedule.kind == "exponential":
        eps = 1.0 - schedule.decay ** step
    else:
        z = step / schedule.k
        eps = 1.0 if z > 700 else 1.0 - schedule.k / (schedule.k + math.exp(z))
    return min(max(eps, 0.0), schedule.cap, 1.0)


_SCHEDULE_KEYS = {
    "schedule": "kind",
    "schedule_slope": "slope",
    "schedule_decay": "decay",
    "schedule_k": "k",
    "schedule_cap": "cap",
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    total_steps: int = 2000
    phase1_steps: int = 0
    dropout_rate: float = 0.2
    min_token_count: int = 1
    schedule: SamplingSchedule = field(default_factory=SamplingSchedule)
    ss_mode: str = "sample"  # "sample" from p_t or take its "argmax"
    seed: int = 0
    embed_dim: int = 64
    shuffle: bool = True
    batch_size: int = 1
    grad_clip: float = 0.0  # L2 cap on the full gradient; 0 disables
    init_scale: float = None  # None -> sqrt(6 / (rows + cols)) per matrix
    log_every: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be > 0")
        if self.total_steps < 0 or not 0 <= self.phase1_steps <= self.total_steps:
            raise ContractViolation("need 0 <= phase1_steps <= total_steps")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must lie in [0, 1)")
        if self.min_token_count < 1 or self.embed_dim < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ContractViolation("min_token_count, embed_dim, batch_size and log_every must be >= 1")
        if self.ss_mode not in ("sample", "argmax"):
            raise ContractViolation("ss_mode must be 'sample' or 'argmax'")
        if self.grad_clip < 0:
            raise ContractViolation("grad_clip must be >= 0")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ContractViolation("init_scale must be > 0")

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale settings: 512-dim embeddings/memory, min word count 5."""
        return cls(**{"embed_dim": 512, "min_token_count": 5, **overrides})

    def to_flat(self):
        flat = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "schedule"}
        for key, attr in _SCHEDULE_KEYS.items():
            flat[key] = getattr(self.schedule, attr)
        return flat

    @classmethod
    def from_flat(cls, mapping, base=None):
        """Build a config from flat ``key -> value`` pairs (strings are coerced).

        Keys are the dataclass field names plus ``schedule_*`` for the
        sampling schedule; unknown keys raise.
        """
        base = base or cls()
        kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
        sched = dataclasses.asdict(base.schedule)
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in mapping.items():
            if key in _SCHEDULE_KEYS:
                attr = _SCHEDULE_KEYS[key]
                sched[attr] = value if attr == "kind" else float(value)
            elif key in types and key != "schedule":
                kwargs[key] = _coerce(key, value, types[key])
            else:
                raise ContractViolation(f"unknown config key {key!r}")
        kwargs["schedule"] = SamplingSchedule(**sched)
        return cls(**kwargs)


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return value
    try:
        if key == "init_scale":
            return None if value.lower() in ("", "none", "xavier") else float(value)
        if typ in (bool, "bool"):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError:
        raise ContractViolation(f"config key {key!r}: cannot parse {value!r}") from None
    return value


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


@dataclass
class TrainLogRecord:
    step: int
    mean_loss: float
    epsilon: float
    phase: str
    wall_time: float
    clipped: int = 0

    def to_json(self):
        return json.dumps(dataclasses.asdict(self))


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # summed caption loss per step
    tokens: list = field(default_factory=list)  # predicted tokens per step
    clipped: int = 0

    def moving_average(self, end, window=100):
        """Mean per-step loss over the ``window`` steps ending at step ``end`` (1-based)."""
        lo = max(0, end - window)
        return float(np.mean(self.losses[lo:end]))


def _choose_word(mode):
    if mode == "argmax":
        return lambda logp, rng: int(np.argmax(logp))
    return lambda logp, rng: sample_categorical(np.exp(logp) / np.exp(logp).sum(), rng)


def train(config, dataset, vocab, params=None, start_step=0, log_sink=None):
    """Run SGD over every (image, caption) pair of ``dataset``.

    Inputs:
    - dataset: CaptionedExamples; each caption is one training item.
    - vocab: Vocabulary used to encode captions (OOV -> UNK).
    - params: starting parameters (copied), or None to initialize from the seed.
    - log_sink: optional callable receiving each TrainLogRecord.

    Returns ``(params, TrainLog)``.
    """
    if not dataset:
        raise ContractViolation("training dataset is empty")
    rng = make_rng(config.seed)
    items = [(ex, vocab.encode(cap)) for ex in dataset for cap in ex.captions]
    dims = ModelDims(dataset[0].features.size, config.embed_dim, len(vocab))
    if params is None:
        params = ModelParams.init(dims, rng, scale=config.init_scale)
    else:
        if params.dims != dims:
            raise ContractViolation(f"initial params {params.dims} do not match {dims}")
        params = params.copy()

    choose = _choose_word(config.ss_mode)
    tlog = TrainLog()
    t0 = time.perf_counter()
    step = start_step
    window_loss = 0.0
    window_n = 0
    while step < config.total_steps:
        order = rng.permutation(len(items)) if config.shuffle else np.arange(len(items))
        for start in range(0, len(order), config.batch_size):
            if step >= config.total_steps:
                break
            eps = sampling_prob(config.schedule, step)
            grads = params.zeros_like()
            batch_loss, batch_tokens = 0.0, 0
            for idx in order[start:start + config.batch_size]:
                ex, tokens = items[idx]
                loss, cache = forward_caption(
                    params, ex.features, tokens, config.dropout_rate, True, rng,
                    sampling_prob=eps, sample_fn=choose,
                )
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step} on example {ex.id}",
                                           step=step, example_id=ex.id)
                backward_caption(params, cache, grads)
                batch_loss += loss
                batch_tokens += cache.n_tokens
            n = len(order[start:start + config.batch_size])
            if n > 1:
                for _, g in grads.items():
                    g /= n
            frozen = step < config.phase1_steps
            if frozen:
                grads.W_enc[...] = 0.0
            if config.grad_clip > 0:
                norm = math.sqrt(sum(float(np.sum(g * g)) for _, g in grads.items()))
                if norm > config.grad_clip:
                    for _, g in grads.items():
                        g *= config.grad_clip / norm
                    tlog.clipped += 1
            try:
                sgd_step(params, grads, config.learning_rate)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at step {step}", step=step) from None

            step += 1
            tlog.losses.append(batch_loss / n)
            tlog.tokens.append(batch_tokens / n)
            window_loss += batch_loss / n
            window_n += 1
            if step % config.log_every == 0 or step == config.total_steps:
                rec = TrainLogRecord(step=step, mean_loss=window_loss / window_n, epsilon=eps,
                                     phase="frozen" if frozen else "joint",
                                     wall_time=round(time.perf_counter() - t0, 3), clipped=tlog.clipped)
                tlog.records.append(rec)
                log.debug("step %d loss %.4f eps %.3f", rec.step, rec.mean_loss, eps)
                if log_sink is not None:
                    log_sink(rec)
                window_loss, window_n = 0.0, 0
    return params, tlog


def mean_token_loss(params, dataset, vocab):
    """Teacher-forced per-token negative log-likelihood, inference mode."""
    total, count = 0.0, 0
    for ex in dataset:
        for cap in ex.captions:
            loss, cache = forward_caption(params, ex.features, vocab.encode(cap))
            total += loss
            count += cache.n_tokens
    return total / count
