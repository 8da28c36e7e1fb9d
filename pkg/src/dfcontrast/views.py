"""Global/local crop pairs for the multi-scale objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from dfcontrast.transforms import (TransformChain, apply_chain, check_image, crop, ensure_min_side,
                                  sample_chain)

GLOBAL_SIZE = 224
LOCAL_SIZE = 96
GLOBAL_AREA = (0.5, 1.0)
LOCAL_AREA = (0.08, 0.5)
ASPECT = (3 / 4, 4 / 3)


@dataclass
class ViewPair:
    global_view: np.ndarray
    local_view: np.ndarray
    global_box: tuple[int, int, int, int]  # (top, left, height, width) in the source image
    local_box: tuple[int, int, int, int]
    global_chain: TransformChain
    local_chain: TransformChain


def sample_box(h: int, w: int, area: tuple[float, float], rng: np.random.Generator,
               upper_inclusive: bool = True) -> tuple[int, int, int, int]:
    """Random crop rectangle with source-area fraction in ``area``.

    The upper bound is exclusive when ``upper_inclusive`` is false; the
    returned integer rectangle honors the bound exactly, not just the
    sampled real-valued target.
    """
    lo, hi = area
    total = h * w
    log_ar = (math.log(ASPECT[0]), math.log(ASPECT[1]))

    def ok(ch, cw):
        frac = ch * cw / total
        return 1 <= ch <= h and 1 <= cw <= w and frac >= lo * 0.999 and (
            frac <= hi if upper_inclusive else frac < hi)

    for _ in range(10):
        target = total * rng.uniform(lo, hi)
        ar = math.exp(rng.uniform(*log_ar))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if ok(ch, cw):
            break
    else:
        s = math.sqrt((lo + hi) / 2)
        ch, cw = max(1, int(h * s)), max(1, int(w * s))
        while not ok(ch, cw) and max(ch, cw) > 1:
            if ch >= cw:
                ch -= 1
            else:
                cw -= 1
    top = int(rng.integers(h - ch + 1))
    left = int(rng.integers(w - cw + 1))
    return top, left, ch, cw


def _view(image, box, size, rng, augment: bool):
    top, left, ch, cw = box
    patch = Image.fromarray(np.ascontiguousarray(image[top:top + ch, left:left + cw]))
    patch = np.asarray(patch.resize((size, size), Image.BILINEAR))
    chain = sample_chain(rng) if augment else TransformChain()
    out = apply_chain(patch, chain)
    return crop(out, size, training=True, rng=rng), chain


def extract_views(image: np.ndarray, rng: np.random.Generator, augment: bool = True,
                  global_size: int = GLOBAL_SIZE, local_size: int = LOCAL_SIZE,
                  global_area=GLOBAL_AREA, local_area=LOCAL_AREA) -> ViewPair:
    """One global (large-area) and one local (< 50% area) view, each through the transform operator."""
    image = ensure_min_side(check_image(image), global_size)
    h, w = image.shape[:2]
    gbox = sample_box(h, w, global_area, rng)
    lbox = sample_box(h, w, local_area, rng, upper_inclusive=False)
    gview, gchain = _view(image, gbox, global_size, rng, augment)
    lview, lchain = _view(image, lbox, local_size, rng, augment)
    return ViewPair(gview, lview, gbox, lbox, gchain, lchain)
