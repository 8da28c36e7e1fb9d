"""Procedural stand-in for a real/generated image corpus.

Real images are colored 1/f noise fields with a few flat shapes pasted on
top. Generated images come from the same family plus a zero-mean pattern of
high-frequency gratings (8-14 px periods). The pattern is fixed per
(fingerprint seed, generator tag) and plays the role of the imprint a given
text-to-image model leaves on its outputs. Gratings rather than a random
pixel tile: a random crop only moves their phase, and blur, JPEG or
rescaling attenuate or detune them instead of wiping them out.

Images are never stored: a ``synth:`` locator carries every parameter needed
to regenerate the raster bit-for-bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image, ImageDraw

from dfcontrast.manifest import STANDARD_TAGS, DatasetRecord, FakeRef

DEFAULT_SIZE = 256
DEFAULT_AMPLITUDE = 24.0  # per-pixel std of the pattern, 0..255 scale

# texture family; a narrow color range keeps image-to-image content variation
# from drowning the pattern at initialization
BASE_RANGE = (100.0, 150.0)
LUM_AMPLITUDE = (15.0, 30.0)
CHROMA_AMPLITUDE = (5.0, 15.0)
N_SHAPES = (1, 4)
SHAPE_SPREAD = 40.0

N_GRATINGS = 3
PERIOD_RANGE = (8.0, 14.0)


@dataclass(frozen=True)
class SynthParams:
    seed: int
    index: int
    tag: str
    fingerprint_seed: int = 0
    amplitude: float = DEFAULT_AMPLITUDE
    size: int = DEFAULT_SIZE

    def locator(self) -> str:
        return (f"synth:seed={self.seed};index={self.index};tag={self.tag};"
                f"fp={self.fingerprint_seed};amp={self.amplitude:g};size={self.size}")

    @classmethod
    def parse(cls, ref: str) -> "SynthParams":
        if not ref.startswith("synth:"):
            raise ValueError(f"not a synth locator: {ref!r}")
        kv = dict(part.split("=", 1) for part in ref[len("synth:"):].split(";"))
        return cls(int(kv["seed"]), int(kv["index"]), kv["tag"], int(kv["fp"]),
                   float(kv["amp"]), int(kv["size"]))


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode())


@lru_cache(maxsize=64)
def fingerprint(tag: str, fingerprint_seed: int = 0, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Unit-std ``(size, size, 3)`` pattern for ``tag``: a sum of oriented gratings.

    Periods are 8-14 px at random orientation and phase, each grating with
    its own color vector (mostly luminance so grayscale keeps it). The field
    is zero-mean over the raster, so it carries no mean-color signal.
    """
    rng = np.random.default_rng([fingerprint_seed, _tag_key(tag)])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size, 3))
    for _ in range(N_GRATINGS):
        period = rng.uniform(*PERIOD_RANGE)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        color = 1.0 + 0.5 * rng.standard_normal(3)
        wave = np.cos(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        field += wave[..., None] * color
    field -= field.mean(axis=(0, 1))
    field /= field.std()
    field.setflags(write=False)
    return field


@lru_cache(maxsize=8)
def _log_freq(size: int) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    return np.log(f)


def _pink_noise(rng: np.random.Generator, size: int, alpha: float) -> np.ndarray:
    amp = np.exp(_log_freq(size) * (-alpha / 2.0))
    amp[0, 0] = 0.0
    shape = amp.shape
    spec = amp * (rng.standard_normal(shape, dtype=np.float32)
                  + 1j * rng.standard_normal(shape, dtype=np.float32))
    field = np.fft.irfft2(spec, s=(size, size))
    return field / (field.std() + 1e-12)


def natural_texture(rng: np.random.Generator, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Float ``(size, size, 3)`` raster in 0..255 with natural-image statistics."""
    alpha = rng.uniform(1.6, 2.4)
    lum = _pink_noise(rng, size, alpha)
    # chroma is smooth; synthesize it at quarter resolution
    small = max(8, size // 4)
    chroma = np.stack([
        np.asarray(Image.fromarray(_pink_noise(rng, small, alpha + 0.5).astype(np.float32), mode="F")
                   .resize((size, size), Image.BILINEAR))
        for _ in range(3)], axis=-1)
    base = rng.uniform(*BASE_RANGE, size=3)
    img = base + rng.uniform(*LUM_AMPLITUDE) * lum[..., None] + rng.uniform(*CHROMA_AMPLITUDE) * chroma

    canvas = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(*N_SHAPES))):
        x0, y0 = rng.uniform(-0.2, 1.0, size=2) * size
        w, h = rng.uniform(0.1, 0.5, size=2) * size
        color = tuple(int(c) for c in np.clip(base + rng.uniform(-SHAPE_SPREAD, SHAPE_SPREAD, size=3), 0, 255))
        box = [x0, y0, x0 + w, y0 + h]
        if rng.integers(2):
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
    shapes = np.asarray(canvas, dtype=np.float64)
    # shapes keep a faint copy of the underlying texture
    return shapes + 0.35 * (img - shapes)


def render(params: SynthParams) -> np.ndarray:
    rng = np.random.default_rng([params.seed, params.index, _tag_key(params.tag)])
    img = natural_texture(rng, params.size)
    if params.tag != "real":
        img = img + params.amplitude * fingerprint(params.tag, params.fingerprint_seed, params.size)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def load_synth(ref: str) -> np.ndarray:
    return render(SynthParams.parse(ref))


def synth_corpus(n_records: int, seed: int, tags=STANDARD_TAGS, split: str = "train",
                 fingerprint_seed: int = 0, amplitude: float = DEFAULT_AMPLITUDE,
                 size: int = DEFAULT_SIZE) -> list[DatasetRecord]:
    """Manifest records for a procedural corpus; one real and ``len(tags)`` fakes each."""
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    records = []
    for i in range(n_records):
        def ref(tag):
            return SynthParams(seed, i, tag, fingerprint_seed, amplitude, size).locator()
        fakes = [FakeRef(tag, ref(tag), size, size, "PNG") for tag in tags]
        records.append(DatasetRecord(
            id=f"{split}-{seed}-{i:06d}", prompt=f"procedural texture {i}",
            negative_prompts=[], real_ref=ref("real"), fakes=fakes, split=split,
            real_size=(size, size)))
    return records


def mean_rgb_guard(records, max_records: int | None = None) -> float:
    """Balanced accuracy of the best single mean-RGB threshold rule.

    Scans every channel, both polarities, and every observed threshold. Used
    to confirm the corpus cannot be separated by color statistics alone.
    """
    feats, labels = [], []
    for rec in records[:max_records]:
        feats.append(load_synth(rec.real_ref).reshape(-1, 3).mean(0))
        labels.append(0)
        for fake in rec.fakes:
            feats.append(load_synth(fake.ref).reshape(-1, 3).mean(0))
            labels.append(1)
    return best_threshold_balanced_accuracy(np.array(feats), np.array(labels))


def best_threshold_balanced_accuracy(feats: np.ndarray, labels: np.ndarray) -> float:
    best = 0.0
    n_pos, n_neg = (labels == 1).sum(), (labels == 0).sum()
    for c in range(feats.shape[1]):
        order = np.argsort(feats[:, c], kind="stable")
        lab = labels[order]
        # predict fake for everything above the cut
        pos_above = n_pos - np.concatenate([[0], np.cumsum(lab == 1)])
        neg_below = np.concatenate([[0], np.cumsum(lab == 0)])
        bal = 0.5 * (pos_above / n_pos + neg_below / n_neg)
        best = max(best, bal.max(), (1 - bal).max())
    return float(best)


class ProceduralClient:
    """Generator stub: a natural texture stamped with this tag's fingerprint."""

    def __init__(self, tag: str, fingerprint_seed: int = 0, amplitude: float = DEFAULT_AMPLITUDE):
        self.tag = tag
        self.fingerprint_seed = fingerprint_seed
        self.amplitude = amplitude

    def generate(self, prompt: str, negative_prompts: list[str], width: int, height: int,
                 seed: int) -> np.ndarray:
        side = max(width, height)
        rng = np.random.default_rng([seed, zlib.crc32(prompt.encode())])
        img = natural_texture(rng, side)[:height, :width]
        img = img + self.amplitude * fingerprint(self.tag, self.fingerprint_seed, side)[:height, :width]
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)
