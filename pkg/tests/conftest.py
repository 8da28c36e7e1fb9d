import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = Path(__file__).parent / "fixtures"


def read_table(name):
    """Rows of a ``|``-separated fixture, comments dropped, cells stripped."""
    rows = []
    for line in (FIXTURES / name).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        rows.append([c.strip() for c in line.split("|")])
    return rows


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# -- desk-scale end-to-end runs, shared by the acceptance suite and the trainer tests --

DESK_TRAIN, DESK_VAL, DESK_TEST = 2000, 64, 480


def _desk_run(out, weights):
    from dfcontrast.evaluate import build_bank, evaluate
    from dfcontrast.synth import synth_corpus
    from dfcontrast.trainer import load_trained, preset, train

    train_recs = synth_corpus(DESK_TRAIN, seed=1)
    val_recs = synth_corpus(DESK_VAL, seed=2, split="val")
    test_recs = synth_corpus(DESK_TEST, seed=3, split="test")
    cfg = preset("desk")
    cfg.loss_weights = weights
    start = time.perf_counter()
    res = train(train_recs, cfg, out, val_records=val_recs)
    model, _ = load_trained(res.best_path)
    bank = build_bank(model, train_recs)
    clean = evaluate(model, train_recs, test_recs, "nn", bank=bank)
    transformed = evaluate(model, train_recs, test_recs, "nn", transforms=True, bank=bank)
    return {"result": res, "config": cfg, "clean": clean, "transformed": transformed,
            "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Full-loss and global-only desk trainings, each scored clean and transformed."""
    root = tmp_path_factory.mktemp("desk")
    return {"full": _desk_run(root / "full", (1.0, 1.0)),
            "global_only": _desk_run(root / "global_only", (1.0, 0.0))}
