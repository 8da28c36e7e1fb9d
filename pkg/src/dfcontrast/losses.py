"""Real/fake contrastive objectives with closed-form gradients.

Both objectives share one shape. Given two classes ``a`` (real) and ``b``
(fake), each with ``N`` anchor embeddings and ``N`` key embeddings:

* anchor ``a_i`` is pulled towards key ``ka[z_i]`` (``z_i != i``) and pushed
  from every key of the other class ``kb[0..N-1]``;
* symmetrically for ``b_i`` against ``kb[z'_i]`` and ``ka``.

Each anchor contributes ``-log softmax`` over ``[t a.ka_z, t a.kb_0, ...]``
and the sum over the ``2N`` anchors is divided by ``2N``.

For the whole-image loss, anchors are untransformed embeddings and keys are
transformed ones; for the multi-scale loss, anchors are local-crop
embeddings and keys are global-crop ones.

The gradients are hand-derived. :class:`PairedInfoNCE` wraps them as an
autograd function so training and the numpy API run the same code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_TEMPERATURE = 10.0


def sample_positive_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each ``i`` in ``range(n)``, a uniform draw from ``range(n) \\ {i}``."""
    if n < 2:
        raise ValueError("positive index undefined for a batch of fewer than 2 pairs")
    z = rng.integers(0, n - 1, size=n)
    return z + (z >= np.arange(n))


def info_nce_terms(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, t: float):
    """Per-anchor losses and gradients.

    ``anchor`` and ``positive`` are ``(N, d)`` (row ``i`` of ``positive`` is the
    key paired with anchor ``i``), ``negatives`` is ``(M, d)`` shared by all
    anchors. Returns ``(loss (N,), g_anchor, g_positive, g_negatives)`` where the
    gradients are of ``loss.sum()``.
    """
    lp = t * (anchor * positive).sum(-1)
    ln = t * anchor @ negatives.T
    logits = torch.cat([lp[:, None], ln], dim=1)
    lse = torch.logsumexp(logits, dim=1)
    q = torch.softmax(logits, dim=1)
    q0, qn = q[:, 0], q[:, 1:]
    g_anchor = t * ((q0 - 1)[:, None] * positive + qn @ negatives)
    g_positive = t * (q0 - 1)[:, None] * anchor
    g_negatives = t * qn.T @ anchor
    return lse - lp, g_anchor, g_positive, g_negatives


def _paired_forward(a, ka, b, kb, z_a, z_b, t):
    n = a.shape[0]
    loss_a, ga, gpa, gnb = info_nce_terms(a, ka[z_a], kb, t)
    loss_b, gb, gpb, gna = info_nce_terms(b, kb[z_b], ka, t)
    g_ka = gna.clone().index_add_(0, z_a, gpa)
    g_kb = gnb.clone().index_add_(0, z_b, gpb)
    scale = 1.0 / (2 * n)
    loss = (loss_a.sum() + loss_b.sum()) * scale
    return loss, tuple(g * scale for g in (ga, g_ka, gb, g_kb))


class PairedInfoNCE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, ka, b, kb, z_a, z_b, t):
        loss, grads = _paired_forward(a, ka, b, kb, z_a, z_b, t)
        ctx.grads = grads
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        ga, gka, gb, gkb = ctx.grads
        return ga * grad_out, gka * grad_out, gb * grad_out, gkb * grad_out, None, None, None


def _check(n_a: int, tensors, t: float):
    if t <= 0:
        raise ValueError("temperature must be positive")
    if n_a < 2:
        raise ValueError("positive index undefined for a batch of fewer than 2 pairs")
    if any(x.shape != tensors[0].shape for x in tensors):
        raise ValueError("all four embedding sets must have the same shape")


def paired_loss(a, ka, b, kb, t: float = DEFAULT_TEMPERATURE, rng: np.random.Generator | None = None,
                z_a=None, z_b=None) -> torch.Tensor:
    """Differentiable loss on torch tensors.

    Positive indices come from ``z_a``/``z_b`` when given, otherwise they are
    drawn from ``rng`` independently for the two classes.
    """
    _check(a.shape[0], (a, ka, b, kb), t)
    n = a.shape[0]
    if z_a is None or z_b is None:
        if rng is None:
            raise ValueError("need either explicit positive indices or an rng")
        z_a = sample_positive_indices(n, rng) if z_a is None else z_a
        z_b = sample_positive_indices(n, rng) if z_b is None else z_b
    z_a = torch.as_tensor(np.asarray(z_a), dtype=torch.long)
    z_b = torch.as_tensor(np.asarray(z_b), dtype=torch.long)
    return PairedInfoNCE.apply(a, ka, b, kb, z_a, z_b, float(t))


@dataclass
class ContrastiveBatch:
    real: np.ndarray
    fake: np.ndarray
    real_aug: np.ndarray
    fake_aug: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE


@dataclass
class MultiScaleBatch:
    real_local: np.ndarray
    real_global: np.ndarray
    fake_local: np.ndarray
    fake_global: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray]


def _numpy_loss(names, arrays, t, rng, z_real, z_fake) -> LossResult:
    a, ka, b, kb = (torch.as_tensor(np.asarray(x, dtype=np.float64)) for x in arrays)
    _check(a.shape[0], (a, ka, b, kb), t)
    n = a.shape[0]
    if (z_real is None or z_fake is None) and rng is None:
        raise ValueError("need either explicit positive indices or an rng")
    if z_real is None:
        z_real = sample_positive_indices(n, rng)
    if z_fake is None:
        z_fake = sample_positive_indices(n, rng)
    z_a = torch.as_tensor(np.asarray(z_real), dtype=torch.long)
    z_b = torch.as_tensor(np.asarray(z_fake), dtype=torch.long)
    loss, grads = _paired_forward(a, ka, b, kb, z_a, z_b, float(t))
    return LossResult(float(loss), {k: g.numpy() for k, g in zip(names, grads)})


def loss_global(batch: ContrastiveBatch, rng: np.random.Generator | None = None,
                z_real=None, z_fake=None) -> LossResult:
    """Whole-image loss; gradients keyed ``real``, ``real_aug``, ``fake``, ``fake_aug``."""
    return _numpy_loss(("real", "real_aug", "fake", "fake_aug"),
                       (batch.real, batch.real_aug, batch.fake, batch.fake_aug),
                       batch.temperature, rng, z_real, z_fake)


def loss_multiscale(batch: MultiScaleBatch, rng: np.random.Generator | None = None,
                    z_real=None, z_fake=None) -> LossResult:
    """Local-to-global loss; gradients keyed by the four crop families."""
    return _numpy_loss(("real_local", "real_global", "fake_local", "fake_global"),
                       (batch.real_local, batch.real_global, batch.fake_local, batch.fake_global),
                       batch.temperature, rng, z_real, z_fake)


def total_loss(global_term, multiscale_term, weights: tuple[float, float] = (1.0, 1.0)):
    return weights[0] * global_term + weights[1] * multiscale_term
