import time

import numpy as np
import pytest

from captioner.datagen import SceneSpec, generate_dataset
from captioner.model import ModelDims, ModelParams
from captioner.numerics import make_rng
from captioner.training import TrainConfig, train
from captioner.vocab import build_vocabulary

OVERFIT_SPEC = SceneSpec(
    subjects=("dog", "cat", "horse", "bird"),
    colors=("red", "black"),
    actions=("running", "sitting"),
    locations=("park",),
    captions_per_scene=1,
    split=(1.0, 0.0, 0.0),
    held_out=[],
)


@pytest.fixture
def rng():
    return make_rng(1234)


def random_params(seed, F=5, d=4, V=7, scale=None):
    return ModelParams.init(ModelDims(F, d, V), make_rng(seed), scale=scale)


@pytest.fixture(scope="session")
def overfit_data():
    ds = generate_dataset(OVERFIT_SPEC, make_rng(0))["train"]
    vocab = build_vocabulary([c for ex in ds for c in ex.captions], 1)
    return ds, vocab


@pytest.fixture(scope="session")
def overfit_run(overfit_data):
    """16 examples, d=32, lr=0.05, 2000 steps, no dropout, teacher forcing."""
    ds, vocab = overfit_data
    cfg = TrainConfig(learning_rate=0.05, total_steps=2000, dropout_rate=0.0, embed_dim=32, seed=0)
    t0 = time.perf_counter()
    params, log = train(cfg, ds, vocab)
    return {"params": params, "log": log, "seconds": time.perf_counter() - t0,
            "data": ds, "vocab": vocab, "config": cfg}


@pytest.fixture(scope="session")
def desk_corpus():
    return generate_dataset(SceneSpec(), make_rng(0))


@pytest.fixture(scope="session")
def desk_run(desk_corpus):
    tr = desk_corpus["train"]
    vocab = build_vocabulary([c for ex in tr for c in ex.captions], 1)
    cfg = TrainConfig(total_steps=3000, dropout_rate=0.0, embed_dim=64, seed=0)
    params, log = train(cfg, tr, vocab)
    return {"params": params, "vocab": vocab, "log": log}


ACCEPTANCE_LINES = []


def acceptance_line(number, title, ok, detail=""):
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
