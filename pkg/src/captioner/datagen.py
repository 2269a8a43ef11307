"""Synthetic compositional caption corpora and the dataset file format.

Dataset files hold one JSON object per line::

    {"id": "scene-007", "features": [0.98, 0.01, ...], "captions": ["a red dog ...", ...]}

``features`` may be any fixed-length float vector, so precomputed CNN
features exported by an external tool load through the same path.
"""

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataFormatError
from .vocab import tokenize

AXES = ("subject", "color", "action", "location")

TEMPLATES = (
    "a {color} {subject} {action} in the {location}",
    "a {color} {subject} is {action} in the {location}",
    "there is a {color} {subject} {action} in the {location}",
    "in the {location} a {color} {subject} is {action}",
)


@dataclass
class CaptionedExample:
    id: str
    features: np.ndarray
    captions: list  # token lists

    def __eq__(self, other):
        return (
            isinstance(other, CaptionedExample)
            and self.id == other.id
            and np.array_equal(self.features, other.features)
            and self.captions == other.captions
        )


@dataclass
class SceneSpec:
    subjects: tuple = ("dog", "cat", "horse", "bird")
    colors: tuple = ("red", "black", "white")
    actions: tuple = ("running", "sitting", "jumping")
    locations: tuple = ("park", "street")
    noise: float = 0.05
    captions_per_scene: int = 3
    split: tuple = (0.8, 0.1, 0.1)
    # Each entry maps a subset of AXES to values; any scene matching all of
    # them is kept out of the training split.
    held_out: list = field(default_factory=lambda: [
        {"color": "red", "subject": "dog"},
        {"color": "white", "subject": "cat"},
    ])

    def axis_values(self, axis):
        return {"subject": self.subjects, "color": self.colors,
                "action": self.actions, "location": self.locations}[axis]

    @property
    def feature_dim(self):
        return sum(len(self.axis_values(a)) for a in AXES)

    def validate(self):
        for a in AXES:
            vals = self.axis_values(a)
            if not vals or len(set(vals)) != len(vals):
                raise ContractViolation(f"axis {a} must be non-empty with distinct values")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ContractViolation(f"split fractions must be three non-negatives summing to 1, got {self.split}")
        if not 1 <= self.captions_per_scene <= len(TEMPLATES):
            raise ContractViolation(f"captions_per_scene must lie in 1..{len(TEMPLATES)}")
        if self.noise < 0:
            raise ContractViolation("noise amplitude must be >= 0")
        for h in self.held_out:
            for a, v in h.items():
                if a not in AXES or v not in self.axis_values(a):
                    raise ContractViolation(f"held-out entry {h} names an unknown axis or value")

    def is_held_out(self, scene):
        return any(all(scene[a] == v for a, v in h.items()) for h in self.held_out)


def render_captions(scene, n):
    return [tokenize(t.format(**scene)) for t in TEMPLATES[:n]]


def scene_features(spec, scene):
    blocks = []
    for a in AXES:
        vals = spec.axis_values(a)
        block = np.zeros(len(vals))
        block[vals.index(scene[a])] = 1.0
        blocks.append(block)
    return np.concatenate(blocks)


def generate_dataset(spec, rng):
    """Return ``{"train": [...], "val": [...], "test": [...]}`` of CaptionedExamples.

    Scenes are enumerated in axis-product order; noise is drawn in that order,
    then non-held-out scenes are shuffled and cut by the split fractions.
    Held-out scenes alternate between val and test.
    """
    spec.validate()
    scenes = [dict(zip(AXES, combo)) for combo in itertools.product(*(spec.axis_values(a) for a in AXES))]
    width = len(str(len(scenes) - 1))
    examples = []
    for k, scene in enumerate(scenes):
        feats = scene_features(spec, scene)
        if spec.noise > 0:
            feats = feats + rng.uniform(-spec.noise, spec.noise, size=feats.shape)
        examples.append(CaptionedExample(f"scene-{k:0{width}d}", feats, render_captions(scene, spec.captions_per_scene)))

    free = [k for k, s in enumerate(scenes) if not spec.is_held_out(s)]
    held = [k for k, s in enumerate(scenes) if spec.is_held_out(s)]
    if not free:
        raise ContractViolation("held-out compositions cover every scene; training split would be empty")
    order = [free[i] for i in rng.permutation(len(free))]
    n_train = max(1, round(spec.split[0] * len(order)))
    n_val = round(spec.split[1] * len(order))
    splits = {
        "train": sorted(order[:n_train]),
        "val": order[n_train:n_train + n_val] + held[0::2],
        "test": order[n_train + n_val:] + held[1::2],
    }
    return {name: [examples[k] for k in sorted(idx)] for name, idx in splits.items()}


def save_dataset(examples, path):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = {"id": ex.id, "features": [float(x) for x in ex.features],
                   "captions": [" ".join(c) for c in ex.captions]}
            f.write(json.dumps(rec) + "\n")


def load_dataset(path):
    """Parse and validate a dataset file into CaptionedExamples."""
    examples, dim, seen = [], None, set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(rec, dict) or not {"id", "features", "captions"} <= rec.keys():
                raise DataFormatError("record needs 'id', 'features' and 'captions'", line=lineno)
            rid = str(rec["id"])
            feats = rec["features"]
            if not isinstance(feats, list) or not feats or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in feats):
                raise DataFormatError(f"record {rid}: features must be a non-empty list of numbers", line=lineno, record_id=rid)
            feats = np.asarray(feats, dtype=np.float64)
            if not np.all(np.isfinite(feats)):
                raise DataFormatError(f"record {rid}: non-finite feature value", line=lineno, record_id=rid)
            if dim is None:
                dim = feats.size
            elif feats.size != dim:
                raise DataFormatError(f"record {rid}: feature dim {feats.size}, expected {dim}", line=lineno, record_id=rid)
            caps = rec["captions"]
            if not isinstance(caps, list) or not caps or not all(isinstance(c, str) for c in caps):
                raise DataFormatError(f"record {rid}: captions must be a non-empty list of strings", line=lineno, record_id=rid)
            if rid in seen:
                raise DataFormatError(f"duplicate record id {rid}", line=lineno, record_id=rid)
            seen.add(rid)
            examples.append(CaptionedExample(rid, feats, [tokenize(c) for c in caps]))
    if not examples:
        raise DataFormatError(f"{path}: dataset file is empty")
    return examples
