"""Training loop: balanced real/fake batches, warmup + cosine schedule, early stopping.

Every optimizer step takes ``N = batch_size // 2`` records, the real image and
one uniformly chosen fake of each. Per image the loop builds a clean crop, a
crop of the image after a sampled transform chain, and a global/local view
pair. The two contrastive terms are weighted and summed.

Randomness is keyed, not streamed: the sample for record ``i`` in epoch ``e``
draws from ``default_rng([seed, e, i])`` and the positive indices of step ``s``
from ``default_rng([seed, e, s, 1])``, so a run is reproducible no matter how
batches are assembled.

The log is JSON lines, one per optimizer step
(``step, epoch, lr, loss_global, loss_multiscale, total``) plus one
``{"epoch", "val_loss", ...}`` line per epoch.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from dfcontrast.backbone import BackboneConfig, ViT, load_checkpoint, save_checkpoint
from dfcontrast.losses import DEFAULT_TEMPERATURE, paired_loss, sample_positive_indices
from dfcontrast.manifest import DatasetRecord, load_image
from dfcontrast.transforms import augment, ensure_min_side, finalize, normalize
from dfcontrast.views import GLOBAL_SIZE, LOCAL_SIZE, extract_views

log = logging.getLogger(__name__)

NO_DECAY = ("pos_embed", "cls_token")


@dataclass
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_start_lr: float = 1e-6
    warmup_epochs: int = 5
    max_epochs: int = 50
    batch_size: int = 64
    accum_steps: int = 1
    patience: int = 6
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    temperature: float = DEFAULT_TEMPERATURE
    loss_weights: tuple[float, float] = (1.0, 1.0)
    seed: int = 0
    backbone: dict = field(default_factory=dict)
    global_size: int = GLOBAL_SIZE
    local_size: int = LOCAL_SIZE
    steps_per_epoch: int | None = None  # cap; None = one pass over the records
    val_batch_size: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.loss_weights = tuple(self.loss_weights)
        if not self.warmup_start_lr < self.peak_lr:
            raise ValueError("warmup_start_lr must be below peak_lr")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 4 (two real/fake halves of >= 2)")
        if self.accum_steps < 1 or self.max_epochs < 1 or self.warmup_epochs < 0:
            raise ValueError("accum_steps and max_epochs must be >= 1, warmup_epochs >= 0")

    @property
    def pairs(self) -> int:
        return self.batch_size // 2

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.from_dict({"image_size": self.global_size, **self.backbone})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["loss_weights"] = list(self.betas), list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def preset(name: str) -> TrainConfig:
    """``desk`` or ``paper``, read from the packaged config files."""
    try:
        text = resources.files("dfcontrast").joinpath(f"configs/{name}.json").read_text()
    except FileNotFoundError:
        raise ValueError(f"no preset named {name!r}") from None
    return TrainConfig.from_dict(json.loads(text))


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from ``warmup_start_lr`` to ``peak_lr``, then cosine to 0 at ``max_epochs``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.warmup_start_lr + (cfg.peak_lr - cfg.warmup_start_lr) * step / warm
    horizon = cfg.max_epochs * steps_per_epoch - warm
    if horizon <= 0:
        return cfg.peak_lr
    progress = min(1.0, (step - warm) / horizon)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class EarlyStopping:
    """Stops once ``patience`` consecutive epochs fail to improve on the best value."""

    def __init__(self, patience: int = 6, min_delta: float = 0.0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch; returns True if this value is a new best."""
        if value < self.best - self.min_delta:
            self.best, self.stale = value, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    log_path: Path
    val_history: list[float]
    epochs_run: int
    best_val: float
    stopped_early: bool


# -- batch assembly --------------------------------------------------------------

@dataclass
class SampleTensors:
    clean: np.ndarray
    aug: np.ndarray
    global_view: np.ndarray | None
    local_view: np.ndarray | None


def prepare_sample(image: np.ndarray, rng: np.random.Generator, cfg: TrainConfig,
                   with_views: bool = True) -> SampleTensors:
    base = ensure_min_side(image, cfg.global_size)
    clean = finalize(base, training=True, rng=rng, size=cfg.global_size)
    aug = finalize(augment(base, rng), training=True, rng=rng, size=cfg.global_size)
    g = l = None
    if with_views:
        views = extract_views(base, rng, global_size=cfg.global_size, local_size=cfg.local_size)
        g, l = normalize(views.global_view), normalize(views.local_view)
    return SampleTensors(clean, aug, g, l)


def pick_fake(record: DatasetRecord, rng: np.random.Generator):
    return record.fakes[int(rng.integers(len(record.fakes)))]


def assemble_batch(records: Sequence[DatasetRecord], keys: Sequence[Sequence[int]], cfg: TrainConfig,
                   loader: Callable[[str], np.ndarray], with_views: bool = True) -> dict[str, torch.Tensor]:
    """Stacked inputs for ``len(records)`` real/fake pairs; ``keys[i]`` seeds record ``i``."""
    parts: dict[str, list] = {k: [] for k in ("real", "real_aug", "fake", "fake_aug",
                                               "real_global", "real_local", "fake_global", "fake_local")}
    for rec, key in zip(records, keys):
        rng = np.random.default_rng(list(key))
        fake_ref = pick_fake(rec, rng).ref
        for cls, ref in (("real", rec.real_ref), ("fake", fake_ref)):
            s = prepare_sample(loader(ref), rng, cfg, with_views)
            parts[cls].append(s.clean)
            parts[cls + "_aug"].append(s.aug)
            if with_views:
                parts[cls + "_global"].append(s.global_view)
                parts[cls + "_local"].append(s.local_view)
    return {k: torch.from_numpy(np.stack(v)) for k, v in parts.items() if v}


def batch_losses(model: ViT, batch: dict[str, torch.Tensor], cfg: TrainConfig,
                 rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    n = batch["real"].shape[0]
    t = cfg.temperature
    with_views = "real_global" in batch and cfg.loss_weights[1] != 0
    big = ["real", "real_aug", "fake", "fake_aug"] + (["real_global", "fake_global"] if with_views else [])
    emb = model(torch.cat([batch[k] for k in big])).split(n)
    e = dict(zip(big, emb))
    z = [sample_positive_indices(n, rng) for _ in range(4)]
    lg = paired_loss(e["real"], e["real_aug"], e["fake"], e["fake_aug"], t, z_a=z[0], z_b=z[1])
    if with_views:
        local = model(torch.cat([batch["real_local"], batch["fake_local"]])).split(n)
        lm = paired_loss(local[0], e["real_global"], local[1], e["fake_global"], t, z_a=z[2], z_b=z[3])
    else:
        lm = torch.zeros((), dtype=lg.dtype)
    return lg, lm


def _param_groups(model: ViT, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 or name in NO_DECAY else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(model: ViT, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(_param_groups(model, cfg.weight_decay), lr=cfg.warmup_start_lr,
                             betas=cfg.betas, eps=cfg.eps)


# -- validation --------------------------------------------------------------------

@torch.no_grad()
def validation_loss(model: ViT, records: Sequence[DatasetRecord], cfg: TrainConfig,
                    loader: Callable[[str], np.ndarray] = load_image, seed: int = 12345) -> float:
    """Weighted total loss on ``records`` with fixed per-record seeds (comparable across epochs)."""
    n = cfg.val_batch_size or cfg.pairs
    if len(records) < 2:
        raise ValueError("validation needs at least 2 records")
    with_views = cfg.loss_weights[1] != 0
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        for start in range(0, len(records), n):
            chunk = records[start:start + n]
            if len(chunk) < 2:
                break
            keys = [(seed, start + i) for i in range(len(chunk))]
            batch = assemble_batch(chunk, keys, cfg, loader, with_views)
            lg, lm = batch_losses(model, batch, cfg, np.random.default_rng([seed, start, 1]))
            total += float(cfg.loss_weights[0] * lg + cfg.loss_weights[1] * lm) * len(chunk)
            count += len(chunk)
    finally:
        model.train(was_training)
    return total / count


# -- the loop ------------------------------------------------------------------------

def _dump_diverged(out: Path, info: dict) -> Path:
    path = out / "diverged.json"
    path.write_text(json.dumps(info, indent=2))
    return path


def train(records: Sequence[DatasetRecord], cfg: TrainConfig, out_dir: str | Path,
          val_records: Sequence[DatasetRecord] | None = None,
          validate: Callable[[ViT, int], float] | None = None,
          loader: Callable[[str], np.ndarray] = load_image,
          model: ViT | None = None) -> TrainResult:
    """Run until ``max_epochs`` or early stopping; keeps ``best.ckpt`` and ``last.ckpt``.

    ``validate(model, epoch)`` overrides the default held-out loss on
    ``val_records``; one of the two must be given.
    """
    if validate is None:
        if not val_records:
            raise ValueError("need val_records or a validate callable")

        def validate(m, _epoch):
            return validation_loss(m, val_records, cfg, loader)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    torch.manual_seed(cfg.seed)
    model = model or ViT(cfg.backbone_config())
    model.train()
    opt = make_optimizer(model, cfg)

    n = cfg.pairs
    micro_per_epoch = len(records) // n
    if micro_per_epoch < cfg.accum_steps:
        raise ValueError(f"{len(records)} records cannot fill one step of {cfg.accum_steps}x{n} pairs")
    steps_per_epoch = micro_per_epoch // cfg.accum_steps
    if cfg.steps_per_epoch:
        steps_per_epoch = min(steps_per_epoch, cfg.steps_per_epoch)
    with_views = cfg.loss_weights[1] != 0
    stopper = EarlyStopping(cfg.patience)
    best_path, last_path, log_path = out / "best.ckpt", out / "last.ckpt", out / "train_log.jsonl"
    history: list[float] = []
    step = 0
    stopped = False

    with open(log_path, "w") as log_fh:
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(records))
            for s in range(steps_per_epoch):
                lr = lr_at(step, cfg, steps_per_epoch)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad(set_to_none=True)
                sums = [0.0, 0.0]
                for a in range(cfg.accum_steps):
                    micro = s * cfg.accum_steps + a
                    idx = order[micro * n:(micro + 1) * n]
                    keys = [(cfg.seed, epoch, int(i)) for i in idx]
                    batch = assemble_batch([records[i] for i in idx], keys, cfg, loader, with_views)
                    lg, lm = batch_losses(model, batch, cfg, np.random.default_rng([cfg.seed, epoch, micro, 1]))
                    total = cfg.loss_weights[0] * lg + cfg.loss_weights[1] * lm
                    if not torch.isfinite(total):
                        dump = _dump_diverged(out, {"epoch": epoch, "step": step, "micro_batch": micro,
                                                    "batch_keys": keys, "record_ids": [records[i].id for i in idx],
                                                    "loss_global": float(lg.detach()), "loss_multiscale": float(lm.detach())})
                        raise TrainingDiverged(f"non-finite loss at step {step}; batch dumped to {dump}")
                    (total / cfg.accum_steps).backward()
                    sums[0] += float(lg.detach()) / cfg.accum_steps
                    sums[1] += float(lm.detach()) / cfg.accum_steps
                opt.step()
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss_global": sums[0], "loss_multiscale": sums[1],
                       "total": cfg.loss_weights[0] * sums[0] + cfg.loss_weights[1] * sums[1]}
                log_fh.write(json.dumps(rec) + "\n")
                step += 1
            val = float(validate(model, epoch))
            history.append(val)
            improved = stopper.update(val)
            extra = {"epoch": epoch, "val_loss": val, "train_config": cfg.to_dict()}
            if improved:
                save_checkpoint(best_path, model, step, extra)
            save_checkpoint(last_path, model, step, extra)
            log_fh.write(json.dumps({"epoch": epoch, "val_loss": val, "best": stopper.best,
                                     "stale": stopper.stale, "seconds": time.perf_counter() - t0}) + "\n")
            log_fh.flush()
            log.info("epoch %d val %.4f (best %.4f, stale %d)", epoch, val, stopper.best, stopper.stale)
            if stopper.should_stop:
                stopped = True
                break
    return TrainResult(best_path, last_path, log_path, history, len(history), stopper.best, stopped)


def load_trained(path: str | Path) -> tuple[ViT, dict]:
    return load_checkpoint(path)
