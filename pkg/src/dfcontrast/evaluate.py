"""Accuracy/AUC metrics, the bank-and-test evaluation pipeline, and the throughput bench.

Accuracies are percentages. ``overall_acc`` is the micro average over all rows,
``real_acc`` covers the real rows, and ``fake_acc`` is the macro mean of the
per-generator accuracies. ``avg_fake`` is that mean restricted to generators
seen in training, ``avg_unseen_fake`` to the ones flagged unseen.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from dfcontrast.backbone import ViT, count_params, embed_batch
from dfcontrast.classifiers import (FAKE, REAL, REAL_TAG, EmbeddingBank, fake_score, fit_linear, fit_ocsvm,
                                    nn_index, predict)
from dfcontrast.manifest import DatasetRecord, load_image
from dfcontrast.transforms import apply_chain, finalize, sample_chain

log = logging.getLogger(__name__)

EVAL_SEED = 20240


@dataclass
class EvalReport:
    overall_acc: float
    real_acc: float | None
    fake_acc: float | None
    per_generator_acc: dict[str, float]
    avg_fake: float | None = None
    avg_unseen_fake: float | None = None
    auc: float | None = None
    throughput_single: float | None = None
    throughput_batched: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    def summary(self) -> str:
        def pct(v):
            return "n/a" if v is None else f"{v:.1f}"
        lines = [f"overall {pct(self.overall_acc)}  real {pct(self.real_acc)}  fake {pct(self.fake_acc)}"]
        lines += [f"  {tag:<10} {pct(acc)}" for tag, acc in self.per_generator_acc.items()]
        if self.avg_unseen_fake is not None:
            lines.append(f"avg seen {pct(self.avg_fake)}  avg unseen {pct(self.avg_unseen_fake)}")
        if self.auc is not None:
            lines.append(f"auc {self.auc:.4f}")
        return "\n".join(lines)


def _pct(correct: int, total: int) -> float:
    return 100.0 * correct / total


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def compute_accuracy(predictions, labels, tags, unseen_tags: Iterable[str] = ()) -> EvalReport:
    """Accuracy breakdown; tags with zero rows are left out of every mean with a warning."""
    pred = np.asarray(predictions).astype(np.int64)
    lab = np.asarray(labels).astype(np.int64)
    tags = list(tags)
    if not len(pred) == len(lab) == len(tags):
        raise ValueError("predictions, labels and tags must be aligned")
    if len(pred) == 0:
        raise ValueError("nothing to score")
    unseen = list(unseen_tags)
    ok = pred == lab
    tag_arr = np.array(tags, dtype=object)
    counts = {t: int((tag_arr == t).sum()) for t in dict.fromkeys(tags)}

    real = lab == REAL
    real_acc = _pct(int(ok[real].sum()), int(real.sum())) if real.any() else None
    per_gen = {}
    fake_tags = [t for t in dict.fromkeys(tags) if t != REAL_TAG] + [t for t in unseen if t not in tags]
    for t in fake_tags:
        rows = (tag_arr == t) & (lab == FAKE)
        if not rows.any():
            warnings.warn(f"generator tag {t!r} has no rows; excluded from means", stacklevel=2)
            continue
        per_gen[t] = _pct(int(ok[rows].sum()), int(rows.sum()))
    seen_accs = [a for t, a in per_gen.items() if t not in unseen]
    unseen_accs = [a for t, a in per_gen.items() if t in unseen]
    return EvalReport(
        overall_acc=_pct(int(ok.sum()), len(ok)),
        real_acc=real_acc,
        fake_acc=_mean(list(per_gen.values())),
        per_generator_acc=per_gen,
        avg_fake=_mean(seen_accs),
        avg_unseen_fake=_mean(unseen_accs),
        counts=counts,
    )


def compute_auc(scores, labels) -> float:
    """ROC area via the Mann-Whitney rank statistic; ``labels`` 1 marks the positive class."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)  # ties get the average rank
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# -- embedding records ------------------------------------------------------------------

def record_rows(records: Sequence[DatasetRecord]) -> tuple[list[str], np.ndarray, list[str]]:
    """Flatten records into (refs, labels, tags): the real image then each fake."""
    refs, labels, tags = [], [], []
    for rec in records:
        refs.append(rec.real_ref)
        labels.append(REAL)
        tags.append(REAL_TAG)
        for f in rec.fakes:
            refs.append(f.ref)
            labels.append(FAKE)
            tags.append(f.tag)
    return refs, np.array(labels, dtype=np.uint8), tags


def embed_refs(model: ViT, refs: Sequence[str], transform_seed: int | None = None,
               loader: Callable[[str], np.ndarray] = load_image, chunk: int = 64) -> np.ndarray:
    """Center-crop embeddings; with ``transform_seed`` each image first gets its own sampled chain."""
    size = model.cfg.image_size
    out = []
    for start in range(0, len(refs), chunk):
        batch = []
        for i, ref in enumerate(refs[start:start + chunk], start):
            img = loader(ref)
            if transform_seed is not None:
                img = apply_chain(img, sample_chain(np.random.default_rng([transform_seed, i])))
            batch.append(finalize(img, training=False, size=size))
        out.append(embed_batch(model, np.stack(batch)))
    if not out:
        return np.zeros((0, model.cfg.output_dim), dtype=np.float32)
    return np.concatenate(out)


def build_bank(model: ViT, records: Sequence[DatasetRecord], transform_seed: int | None = EVAL_SEED,
               loader: Callable[[str], np.ndarray] = load_image) -> EmbeddingBank:
    """Embeddings of every real and fake image of ``records``, each randomly transformed by default."""
    refs, labels, tags = record_rows(records)
    return EmbeddingBank(embed_refs(model, refs, transform_seed, loader), labels, tags)


def fit_classifier(kind: str, bank: EmbeddingBank):
    if kind == "linear":
        return fit_linear(bank)
    if kind == "nn":
        return bank
    if kind == "svm":
        return fit_ocsvm(bank.vectors[bank.labels == REAL])
    raise ValueError(f"unknown classifier {kind!r}")


def evaluate_bank(clf, test: EmbeddingBank, unseen_tags: Iterable[str] = ()) -> EvalReport:
    report = compute_accuracy(predict(clf, test.vectors), test.labels, test.tags, unseen_tags)
    if len(np.unique(test.labels)) == 2:
        report.auc = compute_auc(fake_score(clf, test.vectors), test.labels == FAKE)
    return report


def evaluate(model: ViT, train_records: Sequence[DatasetRecord], test_records: Sequence[DatasetRecord],
             classifier: str = "nn", transforms: bool = False, unseen_tags: Iterable[str] = (),
             seed: int = EVAL_SEED, loader: Callable[[str], np.ndarray] = load_image,
             bank: EmbeddingBank | None = None) -> EvalReport:
    """Fit ``classifier`` on a (transformed) bank of ``train_records`` and score the test records."""
    bank = bank if bank is not None else build_bank(model, train_records, seed, loader)
    clf = fit_classifier(classifier, bank)
    refs, labels, tags = record_rows(test_records)
    vecs = embed_refs(model, refs, seed + 1 if transforms else None, loader)
    report = evaluate_bank(clf, EmbeddingBank(vecs, labels, tags), unseen_tags)
    report.meta.update(classifier=classifier, transforms=transforms, seed=seed,
                       n_bank=len(bank), n_test=len(refs))
    return report


def export_embeddings(bank: EmbeddingBank, path: str | Path) -> Path:
    return bank.save(path)


def plot_report(report: EvalReport, path: str | Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["real"] + list(report.per_generator_acc)
    values = [report.real_acc or 0.0] + list(report.per_generator_acc.values())
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(names), 3.2))
    ax.bar(names, values, color=["tab:blue"] + ["tab:orange"] * (len(names) - 1))
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"overall {report.overall_acc:.1f}")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


# -- throughput -------------------------------------------------------------------------

@dataclass
class BenchReport:
    params: int
    image_size: int
    batch_size: int
    iters: int
    single: float
    batched: float
    single_nn: float
    batched_nn: float

    def to_dict(self) -> dict:
        return asdict(self)


def _time(fn, iters: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return time.perf_counter() - t0


def largest_batch(model: ViT, image_size: int, max_batch: int) -> int:
    """Largest power of two up to ``max_batch`` whose forward pass does not run out of memory."""
    b, best = 1, 1
    while b <= max_batch:
        try:
            with torch.no_grad():
                model(torch.zeros(b, 3, image_size, image_size))
            best = b
        except (RuntimeError, MemoryError):
            break
        b *= 2
    return best


@torch.no_grad()
def bench_throughput(model: ViT, image_size: int | None = None, iters: int = 100, warmup: int = 3,
                     max_batch: int = 64, bank: EmbeddingBank | None = None, seed: int = 0) -> BenchReport:
    """Images/second one-at-a-time and at the largest power-of-two batch, with and without NN lookup."""
    size = image_size or model.cfg.image_size
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    if bank is None:
        v = torch.randn(9600, model.cfg.output_dim, generator=gen).numpy()
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        bank = EmbeddingBank(v, np.r_[np.zeros(1920), np.ones(7680)], ["real"] * 1920 + ["fake"] * 7680)
    batch = largest_batch(model, size, max_batch)
    x1 = torch.randn(1, 3, size, size, generator=gen)
    xb = torch.randn(batch, 3, size, size, generator=gen)

    def with_nn(x):
        return lambda: nn_index(bank, model(x).numpy())

    single = iters / _time(lambda: model(x1), iters, warmup)
    batched = iters * batch / _time(lambda: model(xb), iters, warmup)
    single_nn = iters / _time(with_nn(x1), iters, warmup)
    batched_nn = iters * batch / _time(with_nn(xb), iters, warmup)
    return BenchReport(count_params(model), size, batch, iters, single, batched, single_nn, batched_nn)
