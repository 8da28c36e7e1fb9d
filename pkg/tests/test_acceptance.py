"""One pass/fail test per acceptance criterion.

Run just this file with ``pytest tests/test_acceptance.py -v``. The desk-scale
end-to-end check (criterion 7) trains two backbones and takes roughly half an
hour on a single core; deselect it with ``-m "not slow"``.
"""
import math
import time
from decimal import Decimal

import numpy as np
import pytest

from dfcontrast.classifiers import EmbeddingBank, fit_linear, fit_ocsvm, nn_predict, ocsvm_score
from dfcontrast.evaluate import bench_throughput, compute_accuracy, compute_auc
from dfcontrast.losses import (ContrastiveBatch, MultiScaleBatch, loss_global, loss_multiscale,
                               sample_positive_indices)
from dfcontrast.manifest import engineer_prompt, sample_render_spec
from dfcontrast.synth import synth_corpus
from dfcontrast.trainer import TrainConfig, lr_at, preset, train
from dfcontrast.transforms import N_LEVELS, sample_chain, transform_table
from dfcontrast.backbone import ViT, count_params

from conftest import read_table, unit_rows
from test_classifiers import brute_force_nn, fake_cloud, random_bank, real_cloud, separable_bank
from test_evaluate import TAGS, build, pairwise_auc, rows_with_accuracy
from test_transforms import DISPLAY

FD_STEP = 1e-4


def equal_dot_batch(n, s, d=6):
    x = np.zeros(d)
    x[0] = 1.0
    y = np.zeros(d)
    y[0], y[1] = s, math.sqrt(1 - s * s)
    return np.tile(x, (n, 1)), np.tile(y, (n, 1))


def softmax_oracle(n, s, t):
    """Hand-evaluated loss: every anchor sees 1 + n logits all equal to ``t s``."""
    logits = [t * s] * (n + 1)
    return -math.log(math.exp(logits[0]) / sum(math.exp(v) for v in logits))


def test_c01_closed_form_loss():
    start = time.perf_counter()
    for n in (2, 4, 8):
        for s in (-0.5, 0.0, 0.9):
            a, k = equal_dot_batch(n, s)
            rng = np.random.default_rng(n)
            expected = softmax_oracle(n, s, 10.0)
            assert abs(expected - math.log(1 + n)) < 1e-12
            g = loss_global(ContrastiveBatch(a, a, k, k), rng).value
            m = loss_multiscale(MultiScaleBatch(a, k, a, k), rng).value
            assert abs(g - expected) <= 1e-5 and abs(m - expected) <= 1e-5, (n, s)
    assert time.perf_counter() - start < 1.0


def _central_differences(f, arrays):
    grads = []
    for idx in range(len(arrays)):
        g = np.zeros_like(arrays[idx])
        for pos in np.ndindex(arrays[idx].shape):
            up = [x.copy() for x in arrays]
            down = [x.copy() for x in arrays]
            up[idx][pos] += FD_STEP
            down[idx][pos] -= FD_STEP
            g[pos] = (f(*up) - f(*down)) / (2 * FD_STEP)
        grads.append(g)
    return grads


def test_c02_gradients_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        arrays = [unit_rows(rng, 4, 8) for _ in range(4)]
        z_r, z_f = sample_positive_indices(4, rng), sample_positive_indices(4, rng)
        for fn, cls, names in ((loss_global, ContrastiveBatch, ("real", "fake", "real_aug", "fake_aug")),
                               (loss_multiscale, MultiScaleBatch,
                                ("real_local", "real_global", "fake_local", "fake_global"))):
            def f(*xs):
                return fn(cls(*xs), z_real=z_r, z_fake=z_f).value
            res = fn(cls(*arrays), z_real=z_r, z_fake=z_f)
            for name, fd in zip(names, _central_differences(f, arrays)):
                err = np.linalg.norm(res.grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
                worst = max(worst, err)
    assert worst < 1e-4
    assert time.perf_counter() - start < 30.0


def test_c03_transform_sampler_statistics():
    rng = np.random.default_rng(3)
    lengths = np.zeros(3)
    kinds = {s.kind: 0 for s in transform_table()}
    for _ in range(30_000):
        chain = sample_chain(rng)
        lengths[len(chain.entries)] += 1
        for kind, _ in chain.entries:
            kinds[kind] += 1
    assert np.all(np.abs(lengths / 30_000 - 1 / 3) <= 0.02)
    freq = np.array(list(kinds.values())) / sum(kinds.values())
    assert len(freq) == 17 and np.all(np.abs(freq - 1 / 17) <= 0.01)
    by_kind = {s.kind: s for s in transform_table()}
    for name, lo, hi in read_table("transform_ranges.txt"):
        spec = by_kind[DISPLAY[name]]
        if lo == "-":
            assert spec.levels().size == 0
            continue
        lo, hi = Decimal(lo), Decimal(hi)
        expected = [float(lo + (hi - lo) * k / (N_LEVELS - 1)) for k in range(N_LEVELS)]
        assert spec.levels().tolist() == expected, name


def test_c04_classifier_oracles():
    rng = np.random.default_rng(4)
    for _ in range(100):
        bank = random_bank(rng, int(rng.integers(2, 60)), int(rng.integers(2, 12)))
        q = unit_rows(rng, 1, bank.dim)[0]
        assert nn_predict(bank, q) == bank.labels[brute_force_nn(bank, q)]
    for _ in range(20):
        n = int(rng.integers(2, 501))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.standard_normal(n) + labels, 1)
        assert abs(compute_auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-9
    bank = separable_bank(rng, 200, 800, margin=2.0)
    assert np.mean(fit_linear(bank).predict(bank.vectors) == bank.labels) == 1.0


def test_c05_one_class_svm():
    rng = np.random.default_rng(5)
    x = real_cloud(rng, 400)
    model = fit_ocsvm(x, nu=0.1)
    assert (model.signed_distance(x) < 0).mean() <= 0.15
    reals, fakes = real_cloud(rng, 200), fake_cloud(rng, 200)
    outlier = -ocsvm_score(model, np.vstack([reals, fakes]))
    assert compute_auc(outlier, np.r_[np.zeros(200), np.ones(200)]) >= 0.99
    top = x[np.argmax(model.signed_distance(x))]
    assert abs(ocsvm_score(model, top)[0]) <= 1e-9


def test_c06_metric_fidelity():
    parts = [rows_with_accuracy(4800, 94.0, 0, "real")]
    parts += [rows_with_accuracy(4800, 99.0, 1, t) for t in TAGS]
    rep = compute_accuracy(*build(parts))
    assert rep.real_acc == 94.0 and rep.per_generator_acc == {t: 99.0 for t in TAGS}
    assert rep.overall_acc == 98.0


@pytest.mark.slow
def test_c07_desk_scale_end_to_end(desk_runs):
    full, ablation = desk_runs["full"], desk_runs["global_only"]
    cfg = full["config"]
    assert cfg.backbone_config().depth == 4 and cfg.backbone_config().embed_dim == 64
    assert full["result"].epochs_run <= 15
    clean, transformed = full["clean"], full["transformed"]
    assert clean.meta["n_test"] == 480 * 5
    print(f"\nclean {clean.overall_acc:.1f}  transformed {transformed.overall_acc:.1f}  "
          f"global-only transformed {ablation['transformed'].overall_acc:.1f}  "
          f"runtime {full['seconds']:.0f}s")
    assert clean.overall_acc >= 95.0
    assert clean.overall_acc - transformed.overall_acc < 10.0
    assert ablation["transformed"].overall_acc <= transformed.overall_acc + 1.0
    assert full["seconds"] <= 20 * 60


def test_c08_early_stopping_mechanics(tmp_path):
    records = synth_corpus(16, seed=0, size=48)
    values = iter([5.0] + [5.0 + 0.1 * k for k in range(1, 10)])
    cfg = TrainConfig(peak_lr=1e-3, warmup_epochs=1, max_epochs=30, batch_size=8, temperature=1.0,
                      steps_per_epoch=1, backbone={"patch_size": 16, "embed_dim": 16, "depth": 1, "heads": 2},
                      global_size=32, local_size=16)
    res = train(records, cfg, tmp_path, validate=lambda model, epoch: next(values))
    assert res.stopped_early and res.epochs_run - 1 == 6
    paper = preset("paper")
    spe = 100
    assert lr_at(0, paper, spe) == 1e-6
    assert lr_at(paper.warmup_epochs * spe, paper, spe) == 2e-3


def test_c09_manifest_sampling():
    rng = np.random.default_rng(9)
    n = 10_000
    specs = [sample_render_spec("SD-2.1", rng) for _ in range(n)]
    assert 0.47 <= np.mean([(s.width, s.height) == (512, 512) for s in specs]) <= 0.53
    assert 0.89 <= np.mean([s.encoding == "JPEG" for s in specs]) <= 0.93
    slots = ("std", "shot_type", "lighting", "context", "lens")
    present = np.zeros(len(slots))
    for _ in range(n):
        plan = engineer_prompt("a bridge at dusk", rng)
        present += [getattr(plan, s) is not None for s in slots]
        assert len(plan.negative_prompts) in (0, 5)
    assert np.all(np.abs(present / n - 0.8) <= 0.02)


def test_c10_throughput_bench():
    model = ViT(preset("desk").backbone_config())
    rep = bench_throughput(model, iters=20, warmup=2, max_batch=16)
    print(f"\n{rep}")
    assert rep.params == count_params(model) == 261_952
    assert rep.single > 0 and rep.single_nn > 0
    assert rep.batched >= rep.single
