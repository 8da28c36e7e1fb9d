"""Patch-based Vision Transformer encoder producing unit-norm embeddings.

The read-out is the class token after the final LayerNorm, optionally
projected by a linear head, divided by its l2 norm. Inputs whose side differs
from ``image_size`` (the 96px local crops) are supported by bicubic
interpolation of the patch position grid.

Checkpoint layout (all integers little-endian)::

    magic   b"DFCK"
    version u32 (= 1)
    hlen    u32, length of the UTF-8 JSON header that follows
    header  {"config": {...}, "step": int, "extra": {...},
             "tensors": [{"name", "shape", "offset", "count"}, ...]}
    payload float32 little-endian, tensors concatenated in header order;
            ``offset`` counts float32 elements from the payload start
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"DFCK"
CKPT_VERSION = 1
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    out_dim: int | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def output_dim(self) -> int:
        return self.out_dim or self.embed_dim

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


DESK = BackboneConfig()
# DeiT-Tiny geometry
PAPER = BackboneConfig(embed_dim=192, depth=12, heads=3)


def analytic_param_count(cfg: BackboneConfig) -> int:
    d, h, p = cfg.embed_dim, cfg.hidden_dim, cfg.patch_size
    patch = 3 * p * p * d + d
    tokens = d + (cfg.num_patches + 1) * d  # class token + positions
    block = (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (2 * d) + (d * h + h) + (h * d + d)
    head = 2 * d + (d * cfg.out_dim + cfg.out_dim if cfg.out_dim else 0)
    return patch + tokens + cfg.depth * block + head


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViT(nn.Module):
    def __init__(self, cfg: BackboneConfig = DESK):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.hidden_dim) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.out_dim) if cfg.out_dim else nn.Identity()
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def _positions(self, grid_h: int, grid_w: int) -> torch.Tensor:
        g = self.cfg.grid
        if (grid_h, grid_w) == (g, g):
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        patch_pos = patch_pos.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid_h, grid_w), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, patch_pos.flatten(2).transpose(1, 2)], dim=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Un-normalized read-out for a ``(B, 3, H, W)`` batch, any patch-aligned size."""
        p = self.cfg.patch_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % p or x.shape[3] % p:
            raise ShapeError(f"expected (B, 3, H, W) with sides divisible by {p}, got {tuple(x.shape)}")
        tokens = self.patch_embed(x)
        gh, gw = tokens.shape[-2:]
        tokens = tokens.flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(len(x), -1, -1), tokens], dim=1)
        tokens = tokens + self._positions(gh, gw)
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.head(self.norm(tokens)[:, 0])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.features(x))


def l2_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _as_batch(images, cfg: BackboneConfig) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim != 4 or x.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected inputs of shape (3, {cfg.image_size}, {cfg.image_size}), "
                         f"got {tuple(x.shape[1:])}")
    return x


@torch.no_grad()
def embed(model: ViT, image: np.ndarray) -> np.ndarray:
    """Embedding of one normalized ``(3, S, S)`` image, ``S = image_size``."""
    return embed_batch(model, [image])[0]


@torch.no_grad()
def embed_batch(model: ViT, images, batch_size: int = 64) -> np.ndarray:
    """``(len(images), d)`` float32 embeddings. An empty input yields an empty matrix."""
    if len(images) == 0:
        return np.zeros((0, model.cfg.output_dim), dtype=np.float32)
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(images), batch_size):
            out.append(model(_as_batch(images[i:i + batch_size], model.cfg)).float().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path: str | Path, model: ViT, step: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
        offset += arr.size
    header = json.dumps({"config": asdict(model.cfg), "step": int(step), "extra": extra or {},
                         "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[ViT, dict]:
    """Returns the model (eval mode) and the header dict."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen])
    payload = np.frombuffer(raw, dtype="<f4", offset=12 + hlen)
    model = ViT(BackboneConfig.from_dict(header["config"]))
    state = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["count"]]
        state[t["name"]] = torch.from_numpy(chunk.reshape(t["shape"]).astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model, header
