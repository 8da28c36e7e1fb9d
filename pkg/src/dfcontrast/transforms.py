"""Randomized image-manipulation chains.

An image buffer throughout the package is a ``numpy.ndarray`` of shape
``(H, W, 3)`` and dtype ``uint8``. :func:`normalize` additionally accepts
float rasters in ``[0, 1]``.

A chain holds 0 to 2 transformations drawn uniformly (with replacement) from
the 17-row table in ``data/transforms.csv``. Each parameterized row has five
strength levels spaced evenly over ``[min, max]``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal
from functools import lru_cache
from importlib import resources

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter

N_LEVELS = 5
MAX_CHAIN = 2
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
STRIPE_WIDTH = 8


class TransformError(ValueError):
    """Raised when a transform would produce a degenerate raster."""


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    min_strength: float | None
    max_strength: float | None

    @property
    def has_strength(self) -> bool:
        return self.min_strength is not None

    def levels(self) -> np.ndarray:
        if not self.has_strength:
            return np.empty(0)
        # decimal steps, so 0.2..1.0 gives 0.6 rather than 0.6000000000000001
        lo, hi = Decimal(repr(self.min_strength)), Decimal(repr(self.max_strength))
        return np.array([float(lo + (hi - lo) * k / (N_LEVELS - 1)) for k in range(N_LEVELS)])

    def strength(self, level: int) -> float:
        return float(self.levels()[level])


@dataclass(frozen=True)
class TransformChain:
    entries: tuple[tuple[str, int | None], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if len(self.entries) > MAX_CHAIN:
            raise ValueError(f"chain length {len(self.entries)} exceeds {MAX_CHAIN}")
        specs = transform_specs()
        for kind, level in self.entries:
            spec = specs[kind]
            if spec.has_strength:
                if level is None or not 0 <= level < N_LEVELS:
                    raise ValueError(f"{kind} needs a strength level in [0, {N_LEVELS})")
            elif level is not None:
                raise ValueError(f"{kind} takes no strength level")

    def to_dict(self) -> dict:
        return {"entries": [list(e) for e in self.entries], "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformChain":
        return cls(tuple((k, lvl) for k, lvl in d["entries"]), int(d["seed"]))


@lru_cache(maxsize=None)
def _load_table() -> tuple[TransformSpec, ...]:
    text = resources.files("dfcontrast").joinpath("data/transforms.csv").read_text()
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        lo = float(row["min"]) if row["min"] else None
        hi = float(row["max"]) if row["max"] else None
        if lo is not None and lo > hi:
            raise ValueError(f"bad range for {row['name']}")
        rows.append(TransformSpec(row["name"], lo, hi))
    return tuple(rows)


def transform_table() -> tuple[TransformSpec, ...]:
    """The 17 transform specs in table order."""
    return _load_table()


def transform_specs() -> dict[str, TransformSpec]:
    return {s.kind: s for s in _load_table()}


def sample_chain(rng: np.random.Generator) -> TransformChain:
    table = _load_table()
    length = int(rng.integers(0, MAX_CHAIN + 1))
    entries = []
    for _ in range(length):
        spec = table[int(rng.integers(len(table)))]
        level = int(rng.integers(N_LEVELS)) if spec.has_strength else None
        entries.append((spec.kind, level))
    seed = int(rng.integers(2**31 - 1))
    return TransformChain(tuple(entries), seed)


# -- individual operations ---------------------------------------------------

def _check_size(w: int, h: int, kind: str) -> tuple[int, int]:
    if w < 1 or h < 1:
        raise TransformError(f"{kind} produced a {w}x{h} image")
    return w, h


def _resize(img: Image.Image, w: int, h: int, kind: str) -> Image.Image:
    w, h = _check_size(w, h, kind)
    return img.resize((w, h), Image.BILINEAR)


def _jpeg(img: Image.Image, quality: int) -> Image.Image:
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    return Image.open(buf).convert("RGB")


def _stripes(arr: np.ndarray, opacity: float, vertical: bool) -> np.ndarray:
    h, w = arr.shape[:2]
    coord = np.arange(w if vertical else h)
    on = (coord // STRIPE_WIDTH) % 2 == 0
    mask = (on[None, :] if vertical else on[:, None])[..., None]
    out = arr.astype(np.float32)
    return np.where(mask, (1.0 - opacity) * out + opacity * 255.0, out)


def _apply_one(img: Image.Image, kind: str, s: float | None, rng: np.random.Generator) -> Image.Image:
    w, h = img.size
    if kind == "contrast":
        return ImageEnhance.Contrast(img).enhance(s)
    if kind == "saturation":
        return ImageEnhance.Color(img).enhance(s)
    if kind == "brightness":
        return ImageEnhance.Brightness(img).enhance(s)
    if kind == "sharpen":
        return ImageEnhance.Sharpness(img).enhance(s)
    if kind == "encoding_quality":
        return _jpeg(img, int(round(s)))
    if kind == "opacity":
        # composited over a white canvas
        arr = np.asarray(img, dtype=np.float32)
        return _from_float(s * arr + (1.0 - s) * 255.0)
    if kind == "overlay_stripes":
        vertical = bool(rng.integers(2))
        return _from_float(_stripes(np.asarray(img), s, vertical))
    if kind == "pad":
        pw, ph = int(round(s * w)), int(round(s * h))
        canvas = Image.new("RGB", (w + 2 * pw, h + 2 * ph))
        canvas.paste(img, (pw, ph))
        return canvas
    if kind == "resize":
        # shorter side to s pixels, aspect kept
        f = s / min(w, h)
        return _resize(img, int(round(w * f)), int(round(h * f)), kind)
    if kind == "scale":
        return _resize(img, int(round(w * s)), int(round(h * s)), kind)
    if kind == "aspect_ratio":
        area = w * h
        nw = int(round(np.sqrt(area * s)))
        nh = int(round(area / max(nw, 1)))
        return _resize(img, nw, nh, kind)
    if kind == "pixelization":
        small = _resize(img, int(round(w * s)), int(round(h * s)), kind)
        return small.resize((w, h), Image.NEAREST)
    if kind == "blur":
        return img.filter(ImageFilter.GaussianBlur(radius=s))
    if kind == "rotation":
        return img.rotate(s, resample=Image.BILINEAR, expand=True)
    if kind == "skew":
        # shear of factor s on one axis; canvas grows so no content is lost
        if rng.integers(2):
            nw = w + int(np.ceil(s * h))
            return img.transform((nw, h), Image.AFFINE, (1, -s, 0, 0, 1, 0), Image.BILINEAR)
        nh = h + int(np.ceil(s * w))
        return img.transform((w, nh), Image.AFFINE, (1, 0, 0, -s, 1, 0), Image.BILINEAR)
    if kind == "grayscale":
        return img.convert("L").convert("RGB")
    if kind == "hflip":
        return img.transpose(Image.FLIP_LEFT_RIGHT)
    raise KeyError(kind)


def _from_float(arr: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8))


def check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise TransformError("empty image")
    return image


def apply_chain(image: np.ndarray, chain: TransformChain) -> np.ndarray:
    """Apply ``chain`` left to right. The empty chain returns ``image`` itself."""
    check_image(image)
    if not chain.entries:
        return image
    specs = transform_specs()
    rng = np.random.default_rng(chain.seed)
    img = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    for kind, level in chain.entries:
        spec = specs[kind]
        s = spec.strength(level) if spec.has_strength else None
        img = _apply_one(img, kind, s, rng)
    out = np.asarray(img.convert("RGB"))
    if out.shape[0] < 1 or out.shape[1] < 1:
        raise TransformError("chain produced an empty image")
    return out


def ensure_min_side(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly upscale so the shorter side is at least ``size``."""
    h, w = image.shape[:2]
    if min(h, w) >= size:
        return image
    if h <= w:
        nh, nw = size, max(size, int(round(w * size / h)))
    else:
        nw, nh = size, max(size, int(round(h * size / w)))
    return np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))


def crop(image: np.ndarray, size: int, training: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random (training) or centered (eval) ``size``x``size`` window."""
    image = ensure_min_side(check_image(image), size)
    h, w = image.shape[:2]
    if training:
        if rng is None:
            raise ValueError("training crop needs an rng")
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
    else:
        top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]


def normalize(image: np.ndarray) -> np.ndarray:
    """Channel-wise ImageNet standardization; returns float32 ``(3, H, W)``."""
    x = image.astype(np.float32)
    if image.dtype == np.uint8:
        x /= 255.0
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def finalize(image: np.ndarray, training: bool, rng: np.random.Generator | None = None,
             size: int = 224) -> np.ndarray:
    return normalize(crop(image, size, training, rng))


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """The full operator: sample a chain and apply it."""
    return apply_chain(image, sample_chain(rng))
