"""Dataset records, prompt engineering and manifest construction.

A manifest is a JSON-lines file, one record per line::

    {"id": ..., "prompt": ..., "base_prompt": ..., "negative_prompts": [...],
     "real_ref": ..., "real_size": [w, h],
     "fakes": [{"tag", "ref", "w", "h", "encoding", "negatives_used"}, ...],
     "split": ...}

Keys are sorted and separators fixed, so the same seed and prompt list always
produce a byte-identical file.

Generator clients implement :class:`GeneratorClient`. Only a procedural stub
ships (:class:`dfcontrast.synth.ProceduralClient`); diffusion-model clients
plug in through the same call shape.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

STANDARD_TAGS = ("DF-IF", "SD-1.4", "SD-2.1", "SD-XL")
SD_FAMILY = ("SD-1.4", "SD-2.1", "SD-XL")
UNSEEN_TAGS = ("SD-XL-T", "unCLIP", "SAG", "aMUSEd", "K-2.1", "K-2.2", "K-3", "PA-alpha")
EXTENDED_TAGS = STANDARD_TAGS + UNSEEN_TAGS
SPLIT_TAGS = {"train": STANDARD_TAGS, "val": STANDARD_TAGS, "test": STANDARD_TAGS,
              "extended": EXTENDED_TAGS}

SLOT_PROB = 0.8
NEGATIVE_PROB = 0.5
N_NEGATIVES = 5
OPTIONAL_SLOTS = ("std", "shot_type", "lighting", "context", "lens")

SD_SIZES = ((512, 512), (640, 480), (640, 360))
SD_SIZE_PROBS = (0.5, 0.25, 0.25)
DFIF_SIZE = (256, 256)
UNSEEN_SIZE = (512, 512)
JPEG_PROB = 0.91
OTHER_ENCODINGS = ("BMP", "GIF", "TIFF", "PNG")
EXTENSIONS = {"JPEG": "jpg", "BMP": "bmp", "GIF": "gif", "TIFF": "tiff", "PNG": "png"}


@lru_cache(maxsize=None)
def modifier_table() -> dict[str, tuple[str, ...]]:
    raw = json.loads(resources.files("dfcontrast").joinpath("data/modifiers.json").read_text())
    return {k: tuple(v) for k, v in raw.items()}


@lru_cache(maxsize=None)
def negative_prompt_table() -> tuple[str, ...]:
    return tuple(json.loads(
        resources.files("dfcontrast").joinpath("data/negative_prompts.json").read_text()))


@lru_cache(maxsize=None)
def generator_models() -> dict[str, str]:
    raw = json.loads(resources.files("dfcontrast").joinpath("data/generators.json").read_text())
    return {**raw["standard"], **raw["unseen"]}


# -- records -----------------------------------------------------------------

@dataclass
class FakeRef:
    tag: str
    ref: str
    w: int
    h: int
    encoding: str
    negatives_used: bool = False


@dataclass
class DatasetRecord:
    id: str
    prompt: str
    negative_prompts: list[str]
    real_ref: str
    fakes: list[FakeRef]
    split: str
    base_prompt: str = ""
    real_size: tuple[int, int] | None = None

    @property
    def fake_tags(self) -> tuple[str, ...]:
        return tuple(f.tag for f in self.fakes)

    def validate(self) -> None:
        expected = SPLIT_TAGS.get(self.split)
        if expected is not None and set(self.fake_tags) != set(expected):
            raise ValueError(f"record {self.id}: split {self.split!r} needs tags {expected}, "
                             f"got {self.fake_tags}")

    def to_json(self) -> str:
        d = asdict(self)
        if d["real_size"] is not None:
            d["real_size"] = list(d["real_size"])
        return json.dumps(d, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        d = json.loads(line)
        d["fakes"] = [FakeRef(**f) for f in d["fakes"]]
        if d.get("real_size") is not None:
            d["real_size"] = tuple(d["real_size"])
        return cls(**d)


def write_manifest(records: Iterable[DatasetRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def read_manifest(path: str | Path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord.from_json(line) for line in fh if line.strip()]


# -- prompt engineering --------------------------------------------------------

@dataclass
class PromptPlan:
    base_prompt: str
    photo_type: str
    std: str | None = None
    shot_type: str | None = None
    lighting: str | None = None
    context: str | None = None
    lens: str | None = None
    negative_prompts: list[str] = field(default_factory=list)

    def render(self) -> str:
        """``A [<std>] <photo type> of <prompt>, [<shot type>], [<lighting> light], [<context>], [<lens> lens]``"""
        head = "A " + (f"{self.std} " if self.std else "") + f"{self.photo_type} of {self.base_prompt}"
        tail = [self.shot_type,
                f"{self.lighting} light" if self.lighting else None,
                self.context,
                f"{self.lens} lens" if self.lens else None]
        return ", ".join([head] + [t for t in tail if t])


def engineer_prompt(base: str, rng: np.random.Generator) -> PromptPlan:
    if not base.strip():
        raise ValueError("base prompt is empty")
    table = modifier_table()
    picks = {}
    for slot in OPTIONAL_SLOTS:
        present = rng.random() < SLOT_PROB
        choice = table[slot][int(rng.integers(len(table[slot])))]
        picks[slot] = choice if present else None
    photo_type = table["photo_type"][int(rng.integers(len(table["photo_type"])))]
    negatives: list[str] = []
    if rng.random() < NEGATIVE_PROB:
        pool = negative_prompt_table()
        idx = rng.choice(len(pool), size=N_NEGATIVES, replace=False)
        negatives = [pool[i] for i in idx]
    return PromptPlan(base_prompt=base, photo_type=photo_type, negative_prompts=negatives, **picks)


def parse_prompt(text: str) -> PromptPlan:
    """Inverse of :meth:`PromptPlan.render` (negative prompts are not part of the text).

    Optional trailing slots are peeled off from the right in template order,
    so a base prompt whose last comma-separated piece equals a modifier
    value cannot be told apart from that modifier.
    """
    table = modifier_table()
    if not text.startswith("A "):
        raise ValueError(f"not a templated prompt: {text!r}")
    rest = text[2:]
    std = None
    for value in sorted(table["std"], key=len, reverse=True):
        if rest.startswith(value + " ") and any(
                rest[len(value) + 1:].startswith(pt + " of ") for pt in table["photo_type"]):
            std, rest = value, rest[len(value) + 1:]
            break
    for pt in table["photo_type"]:
        if rest.startswith(pt + " of "):
            photo_type, rest = pt, rest[len(pt) + 4:]
            break
    else:
        raise ValueError(f"no photo type in {text!r}")

    pieces = rest.split(", ")
    found: dict[str, str | None] = {"shot_type": None, "lighting": None, "context": None, "lens": None}
    matchers = [
        ("lens", lambda p: p[:-5] if p.endswith(" lens") and p[:-5] in table["lens"] else None),
        ("context", lambda p: p if p in table["context"] else None),
        ("lighting", lambda p: p[:-6] if p.endswith(" light") and p[:-6] in table["lighting"] else None),
        ("shot_type", lambda p: p if p in table["shot_type"] else None),
    ]
    for slot, match in matchers:
        if len(pieces) > 1:
            value = match(pieces[-1])
            if value is not None:
                found[slot] = value
                pieces.pop()
    return PromptPlan(base_prompt=", ".join(pieces), photo_type=photo_type, std=std, **found)


# -- rendering specs and generator clients -------------------------------------

@dataclass(frozen=True)
class RenderSpec:
    width: int
    height: int
    encoding: str


def sample_render_spec(tag: str, rng: np.random.Generator, split: str = "train") -> RenderSpec:
    if tag in SD_FAMILY:
        w, h = SD_SIZES[int(rng.choice(len(SD_SIZES), p=SD_SIZE_PROBS))]
    elif tag == "DF-IF":
        w, h = DFIF_SIZE
    elif tag in UNSEEN_TAGS:
        w, h = UNSEEN_SIZE
    else:
        raise KeyError(f"unknown generator tag {tag!r}")
    if rng.random() < JPEG_PROB:
        encoding = "JPEG"
    else:
        encoding = OTHER_ENCODINGS[int(rng.integers(len(OTHER_ENCODINGS)))]
    if split == "extended":
        encoding = "JPEG"
    return RenderSpec(w, h, encoding)


class GeneratorClient(Protocol):
    """Text-to-image backend.

    ``generate`` returns an RGB raster of shape ``(height, width, 3)``, dtype
    uint8. Encoding to the sampled file format happens in the manifest
    builder, never in the client. ``negative_prompts`` is empty for backends
    that do not accept them.
    """

    tag: str

    def generate(self, prompt: str, negative_prompts: list[str], width: int, height: int,
                 seed: int) -> np.ndarray: ...


def encode_image(raster: np.ndarray, encoding: str) -> bytes:
    buf = io.BytesIO()
    img = Image.fromarray(raster)
    if encoding == "JPEG":
        img.save(buf, format="JPEG", quality=95)
    else:
        img.save(buf, format=encoding)
    return buf.getvalue()


@dataclass
class BuildResult:
    records: list[DatasetRecord]
    skipped: list[dict]


def build_manifest(prompts: Iterable[str | tuple[str, str]], clients: dict[str, GeneratorClient],
                   seed: int, split: str = "train", image_dir: str | Path | None = None) -> BuildResult:
    """One record per prompt; a failing client skips (and logs) the whole record.

    ``prompts`` yields either a base prompt or a ``(base prompt, real locator)``
    pair. Each record draws from its own ``(seed, index)`` stream so records
    can be built in any order. When ``image_dir`` is set the generated rasters
    are written there in their sampled encoding; refs are always relative
    ``<tag>/<id>.<ext>`` paths.
    """
    records, skipped = [], []
    image_dir = Path(image_dir) if image_dir is not None else None
    for idx, item in enumerate(prompts):
        base, real_ref = (item, "") if isinstance(item, str) else item
        rng = np.random.default_rng([seed, idx])
        plan = engineer_prompt(base, rng)
        text = plan.render()
        rec_id = f"{split}-{idx:07d}"
        fakes = []
        try:
            for tag, client in clients.items():
                spec = sample_render_spec(tag, rng, split)
                use_neg = tag != "SD-1.4"
                gen_seed = int(rng.integers(2**31 - 1))
                raster = client.generate(text, plan.negative_prompts if use_neg else [],
                                         spec.width, spec.height, gen_seed)
                if raster.shape != (spec.height, spec.width, 3):
                    raise ValueError(f"{tag} returned shape {raster.shape}")
                ref = f"{tag}/{rec_id}.{EXTENSIONS[spec.encoding]}"
                if image_dir is not None:
                    dest = image_dir / ref
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    dest.write_bytes(encode_image(raster, spec.encoding))
                fakes.append(FakeRef(tag, ref, spec.width, spec.height, spec.encoding,
                                     use_neg and bool(plan.negative_prompts)))
        except Exception as exc:  # noqa: BLE001 - any client failure skips the record
            log.warning("skipping record %s: %s", rec_id, exc)
            skipped.append({"id": rec_id, "base_prompt": base, "error": repr(exc)})
            continue
        records.append(DatasetRecord(rec_id, text, list(plan.negative_prompts), real_ref or f"real/{rec_id}",
                                     fakes, split, base_prompt=base))
    return BuildResult(records, skipped)


def load_image(ref: str, root: str | Path | None = None) -> np.ndarray:
    """Decode the raster behind a locator as ``(H, W, 3)`` uint8.

    ``synth:`` locators are re-rendered; anything else is a file path,
    relative to ``root`` when one is given.
    """
    if ref.startswith("synth:"):
        from dfcontrast.synth import load_synth  # synth depends on this module
        return load_synth(ref)
    path = Path(root) / ref if root is not None else Path(ref)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))
