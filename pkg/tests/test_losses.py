import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dfcontrast.losses import (ContrastiveBatch, MultiScaleBatch, info_nce_terms, loss_global, loss_multiscale,
                               paired_loss, sample_positive_indices, total_loss)

from conftest import unit_rows


def reference_loss(a, ka, b, kb, z_a, z_b, t):
    """Plain double loop over anchors; the softmax is written out term by term."""
    n = len(a)
    total = 0.0
    for anchors, pos_keys, neg_keys, z in ((a, ka, kb, z_a), (b, kb, ka, z_b)):
        for i in range(n):
            num = math.exp(t * float(anchors[i] @ pos_keys[z[i]]))
            den = num + sum(math.exp(t * float(anchors[i] @ neg_keys[j])) for j in range(n))
            total -= math.log(num / den)
    return total / (2 * n)


def equal_dot_batch(n, s, d=6):
    """Anchors all ``x`` and keys all ``y`` with ``x.y = s``: every logit equals ``t s``."""
    x = np.zeros(d)
    x[0] = 1.0
    y = np.zeros(d)
    y[0], y[1] = s, math.sqrt(1 - s * s)
    anchors = np.tile(x, (n, 1))
    keys = np.tile(y, (n, 1))
    return anchors, keys


@pytest.mark.parametrize("n", [2, 4, 8])
@pytest.mark.parametrize("s", [-0.5, 0.0, 0.9])
@pytest.mark.parametrize("t", [1.0, 10.0])
def test_equal_dots_give_log_one_plus_n(n, s, t):
    anchors, keys = equal_dot_batch(n, s)
    rng = np.random.default_rng(n)
    g = loss_global(ContrastiveBatch(anchors, anchors, keys, keys, t), rng)
    m = loss_multiscale(MultiScaleBatch(anchors, keys, anchors, keys, t), rng)
    assert g.value == pytest.approx(math.log(1 + n), abs=1e-5)
    assert m.value == pytest.approx(math.log(1 + n), abs=1e-5)


def test_identical_embeddings_n8():
    v = np.tile(unit_rows(np.random.default_rng(1), 1, 16), (8, 1))
    res = loss_global(ContrastiveBatch(v, v, v, v), np.random.default_rng(0))
    assert res.value == pytest.approx(2.1972, abs=1e-4)
    assert res.value == pytest.approx(math.log(9), abs=1e-5)


def test_n2_equal_similarity_is_log3():
    anchors, keys = equal_dot_batch(2, 0.3)
    res = loss_global(ContrastiveBatch(anchors, anchors, keys, keys), np.random.default_rng(0))
    assert res.value == pytest.approx(math.log(3), abs=1e-6)


@pytest.mark.parametrize("n", [2, 4])
def test_separated_batch_is_near_zero(n):
    e = np.zeros((n, 4))
    e[:, 0] = 1.0
    res = loss_global(ContrastiveBatch(e, -e, e, -e, 10.0), np.random.default_rng(0))
    assert res.value < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_loop(seed):
    rng = np.random.default_rng(seed)
    n, d, t = 5, 7, 3.0
    a, ka, b, kb = (unit_rows(rng, n, d) for _ in range(4))
    z_a, z_b = sample_positive_indices(n, rng), sample_positive_indices(n, rng)
    got = loss_global(ContrastiveBatch(a, b, ka, kb, t), z_real=z_a, z_fake=z_b).value
    assert got == pytest.approx(reference_loss(a, ka, b, kb, z_a, z_b, t), rel=1e-12)


def _fd_grads(fn, arrays, h=1e-4):
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (fn(*plus) - fn(*minus)) / (2 * h)
        grads.append(g)
    return grads


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_gradients_match_finite_differences_multiscale():
    rng = np.random.default_rng(7)
    n, d, t = 4, 8, 2.0
    arrays = [unit_rows(rng, n, d) for _ in range(4)]
    z_r, z_f = sample_positive_indices(n, rng), sample_positive_indices(n, rng)

    def f(rl, rg, fl, fg):
        return loss_multiscale(MultiScaleBatch(rl, rg, fl, fg, t), z_real=z_r, z_fake=z_f).value

    res = loss_multiscale(MultiScaleBatch(*arrays, t), z_real=z_r, z_fake=z_f)
    fd = _fd_grads(f, arrays)
    for name, g in zip(("real_local", "real_global", "fake_local", "fake_global"), fd):
        assert _rel_err(res.grads[name], g) < 1e-4, name


def test_autograd_path_matches_numpy_path():
    rng = np.random.default_rng(3)
    arrays = [unit_rows(rng, 6, 5) for _ in range(4)]
    z_a, z_b = sample_positive_indices(6, rng), sample_positive_indices(6, rng)
    ts = [torch.tensor(x, requires_grad=True) for x in arrays]
    loss = paired_loss(*ts, t=4.0, z_a=z_a, z_b=z_b)
    loss.backward()
    ref = loss_global(ContrastiveBatch(arrays[0], arrays[2], arrays[1], arrays[3], 4.0), z_real=z_a, z_fake=z_b)
    assert float(loss.detach()) == pytest.approx(ref.value, rel=1e-12)
    for x, name in zip(ts, ("real", "real_aug", "fake", "fake_aug")):
        np.testing.assert_allclose(x.grad.numpy(), ref.grads[name], rtol=1e-10, atol=1e-12)


def test_autograd_matches_plain_torch_softmax():
    rng = np.random.default_rng(11)
    a, ka, b, kb = (torch.tensor(unit_rows(rng, 4, 8), requires_grad=True) for _ in range(4))
    z_a, z_b = sample_positive_indices(4, rng), sample_positive_indices(4, rng)
    t = 5.0

    def plain(a, ka, b, kb):
        out = 0
        for x, kx, ky, z in ((a, ka, kb, z_a), (b, kb, ka, z_b)):
            logits = t * torch.cat([(x * kx[torch.as_tensor(z)]).sum(1, keepdim=True), x @ ky.T], 1)
            out = out + torch.nn.functional.cross_entropy(logits, torch.zeros(4, dtype=torch.long), reduction="sum")
        return out / 8

    ours = torch.autograd.grad(paired_loss(a, ka, b, kb, t=t, z_a=z_a, z_b=z_b), (a, ka, b, kb))
    ref = torch.autograd.grad(plain(a, ka, b, kb), (a, ka, b, kb))
    for g1, g2 in zip(ours, ref):
        torch.testing.assert_close(g1, g2, rtol=1e-10, atol=1e-12)


@given(seed=st.integers(0, 10_000), bump=st.floats(0.01, 0.5))
def test_larger_positive_similarity_lowers_loss(seed, bump):
    rng = np.random.default_rng(seed)
    anchor = torch.tensor(unit_rows(rng, 3, 6))
    positive = torch.tensor(unit_rows(rng, 3, 6))
    negatives = torch.tensor(unit_rows(rng, 5, 6))
    base = info_nce_terms(anchor, positive, negatives, 3.0)[0]
    # moving the positive along the anchor raises only the positive logit
    closer = info_nce_terms(anchor, positive + bump * anchor, negatives, 3.0)[0]
    assert torch.all(closer < base)


@given(seed=st.integers(0, 10_000))
def test_shuffling_fake_pairs_keeps_loss(seed):
    rng = np.random.default_rng(seed)
    n = 6
    a, ka, b, kb = (unit_rows(rng, n, 8) for _ in range(4))
    z_a, z_b = sample_positive_indices(n, rng), sample_positive_indices(n, rng)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    base = loss_global(ContrastiveBatch(a, b, ka, kb, 10.0), z_real=z_a, z_fake=z_b).value
    shuffled = loss_global(ContrastiveBatch(a, b[perm], ka, kb[perm], 10.0),
                           z_real=z_a, z_fake=inv[z_b[perm]]).value
    assert shuffled == pytest.approx(base, abs=1e-7)


@given(seed=st.integers(0, 10_000))
def test_multiscale_symmetric_in_classes(seed):
    rng = np.random.default_rng(seed)
    rl, rg, fl, fg = (unit_rows(rng, 4, 8) for _ in range(4))
    z_r, z_f = sample_positive_indices(4, rng), sample_positive_indices(4, rng)
    one = loss_multiscale(MultiScaleBatch(rl, rg, fl, fg), z_real=z_r, z_fake=z_f).value
    swapped = loss_multiscale(MultiScaleBatch(fl, fg, rl, rg), z_real=z_f, z_fake=z_r).value
    assert swapped == pytest.approx(one, rel=1e-12)


@given(n=st.integers(2, 50), seed=st.integers(0, 10_000))
def test_positive_index_never_self(n, seed):
    z = sample_positive_indices(n, np.random.default_rng(seed))
    assert np.all(z != np.arange(n))
    assert np.all((0 <= z) & (z < n))


def test_positive_index_is_uniform():
    rng = np.random.default_rng(0)
    z = np.stack([sample_positive_indices(4, rng) for _ in range(30_000)])
    for i in range(4):
        freq = np.bincount(z[:, i], minlength=4) / len(z)
        assert freq[i] == 0
        np.testing.assert_allclose(np.delete(freq, i), 1 / 3, atol=0.015)


def test_errors():
    v = unit_rows(np.random.default_rng(0), 1, 4)
    with pytest.raises(ValueError, match="positive index"):
        loss_global(ContrastiveBatch(v, v, v, v), np.random.default_rng(0))
    w = unit_rows(np.random.default_rng(0), 3, 4)
    with pytest.raises(ValueError, match="temperature"):
        loss_global(ContrastiveBatch(w, w, w, w, 0.0), np.random.default_rng(0))
    with pytest.raises(ValueError):
        loss_global(ContrastiveBatch(w, w[:2], w, w), np.random.default_rng(0))


def test_total_loss():
    assert total_loss(2.0, 3.0) == 5.0
    assert total_loss(0, 0) == 0
    assert total_loss(2.0, 3.0, (1.0, 0.0)) == 2.0
