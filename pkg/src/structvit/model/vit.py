"""Tiny grayscale vision transformer; the only part that survives deployment."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from structvit import numerics as nx
from structvit.model import layers
from structvit.numerics import Tensor

PREFIX = "vit"


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_hidden: int = 64
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if min(self.image_size, self.patch_size, self.dim, self.depth, self.heads, self.mlp_hidden) < 1:
            raise ValueError("VitConfig sizes must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return 1 + self.num_patches

    def to_dict(self) -> dict:
        return asdict(self)


def init_vit(cfg: VitConfig, rng: np.random.Generator) -> layers.Params:
    p: layers.Params = {}
    std = cfg.init_std
    p[f"{PREFIX}.patch.w"] = layers.normal(rng, (cfg.patch_size**2, cfg.dim), std, f"{PREFIX}.patch.w")
    p[f"{PREFIX}.patch.b"] = layers.zeros((cfg.dim,), f"{PREFIX}.patch.b")
    p[f"{PREFIX}.cls"] = layers.normal(rng, (1, cfg.dim), std, f"{PREFIX}.cls")
    p[f"{PREFIX}.pos"] = layers.normal(rng, (cfg.seq_len, cfg.dim), std, f"{PREFIX}.pos")
    for i in range(cfg.depth):
        p.update(layers.init_block(f"{PREFIX}.block{i}", cfg.dim, cfg.mlp_hidden, rng, std))
    p.update(layers.init_norm(f"{PREFIX}.ln_f", cfg.dim))
    return p


def patchify(image: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """(S, S) image -> (num_patches, patch_size**2), patches in row-major grid order."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (cfg.image_size, cfg.image_size):
        raise nx.DimensionError(f"expected a {cfg.image_size}x{cfg.image_size} image, got {img.shape}")
    g, ps = cfg.grid, cfg.patch_size
    return img.reshape(g, ps, g, ps).transpose(0, 2, 1, 3).reshape(g * g, ps * ps)


def encode(image: np.ndarray, params: layers.Params, cfg: VitConfig) -> Tensor:
    """Token features (1 + num_patches, dim); row 0 is CLS."""
    patches = Tensor(patchify(image, cfg))
    x = layers.linear(patches, params[f"{PREFIX}.patch.w"], params[f"{PREFIX}.patch.b"])
    x = nx.concat([params[f"{PREFIX}.cls"], x], axis=0)
    x = nx.add(x, params[f"{PREFIX}.pos"])
    for i in range(cfg.depth):
        x = layers.block(x, params, f"{PREFIX}.block{i}", cfg.heads)
    return layers.norm(x, params, f"{PREFIX}.ln_f")


def cls_embeddings(images: np.ndarray, params: layers.Params, cfg: VitConfig) -> np.ndarray:
    """CLS rows for a stack of images, forward only."""
    return np.stack([encode(img, params, cfg).value[0] for img in images])
