"""Grouped cross-attention projector with an attention-overlap penalty.

G groups of M learnable queries attend over the encoder tokens. All groups
share one set of query/key/value projections; only the query vectors differ
per group. Group outputs and a strided subset of patch tokens go through one
shared 2-layer MLP into the teacher's embedding width.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from structvit import numerics as nx
from structvit.model import layers
from structvit.numerics import Tensor

PREFIX = "spd"


@dataclass(frozen=True)
class SpdConfig:
    num_groups: int = 4
    queries_per_group: int = 2
    heads: int = 1
    vit_dim: int = 32
    teacher_dim: int = 64
    patch_stride: int = 2
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.num_groups < 1 or self.queries_per_group < 1 or self.heads < 1:
            raise ValueError("num_groups, queries_per_group and heads must be >= 1")
        if self.vit_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide vit_dim={self.vit_dim}")
        if self.patch_stride < 1:
            raise ValueError("patch_stride must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.vit_dim // self.heads

    @property
    def num_tokens(self) -> int:
        return self.num_groups * self.queries_per_group

    def num_patch_tokens(self, seq_len: int) -> int:
        return math.ceil((seq_len - 1) / self.patch_stride)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpdOutput:
    maps: list[Tensor]
    tokens: list[Tensor]
    ortho: Tensor
    projected: Tensor | None = None
    head_maps: list[list[Tensor]] | None = None


def init_spd(cfg: SpdConfig, rng: np.random.Generator) -> layers.Params:
    p: layers.Params = {}
    d, std = cfg.vit_dim, cfg.init_std
    for g in range(cfg.num_groups):
        p[f"{PREFIX}.query{g}"] = layers.normal(rng, (cfg.queries_per_group, d), std, f"{PREFIX}.query{g}")
    for w in ("w_q", "w_k", "w_v"):
        p[f"{PREFIX}.{w}"] = layers.normal(rng, (d, d), std, f"{PREFIX}.{w}")
    # fan-in scaling so projected tokens are O(1) before the teacher's layer norms
    p[f"{PREFIX}.mlp.w1"] = layers.normal(rng, (d, cfg.teacher_dim), 1 / math.sqrt(d), f"{PREFIX}.mlp.w1")
    p[f"{PREFIX}.mlp.b1"] = layers.zeros((cfg.teacher_dim,), f"{PREFIX}.mlp.b1")
    p[f"{PREFIX}.mlp.w2"] = layers.normal(rng, (cfg.teacher_dim, cfg.teacher_dim), 1 / math.sqrt(cfg.teacher_dim), f"{PREFIX}.mlp.w2")
    p[f"{PREFIX}.mlp.b2"] = layers.zeros((cfg.teacher_dim,), f"{PREFIX}.mlp.b2")
    return p


def spd_attention(x: Tensor, params: layers.Params, cfg: SpdConfig) -> SpdOutput:
    """Per-group maps softmax((Q_g W_Q)(X W_K)^T / sqrt(d_h)) and tokens A_g (X W_V).

    With several heads the tokens concatenate the heads and the reported map is
    the head mean.
    """
    if x.value.ndim != 2 or x.shape[1] != cfg.vit_dim:
        raise nx.DimensionError(f"expected tokens of width {cfg.vit_dim}, got {x.shape}")
    keys = nx.matmul(x, params[f"{PREFIX}.w_k"])
    values = nx.matmul(x, params[f"{PREFIX}.w_v"])
    maps, tokens, head_maps = [], [], []
    for g in range(cfg.num_groups):
        q = nx.matmul(params[f"{PREFIX}.query{g}"], params[f"{PREFIX}.w_q"])
        t, per_head = layers.multi_head_attention(q, keys, values, cfg.heads)
        tokens.append(t)
        head_maps.append(per_head)
        maps.append(per_head[0] if cfg.heads == 1 else nx.mean_of(per_head))
    return SpdOutput(maps=maps, tokens=tokens, ortho=ortho_loss(maps), head_maps=head_maps)


def ortho_loss(maps: list[Tensor]) -> Tensor:
    """Sum over ordered pairs g != g' of ||A_g A_g'^T||_F^2."""
    if not maps:
        raise ValueError("ortho_loss needs at least one attention map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise nx.DimensionError(f"attention maps differ in shape: {[m.shape for m in maps]}")
    terms = [
        nx.frobenius_sq(nx.matmul(a, nx.transpose(b)))
        for i, a in enumerate(maps)
        for j, b in enumerate(maps)
        if i != j
    ]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return total


def select_patches(x: Tensor, cfg: SpdConfig) -> Tensor:
    """Every ``patch_stride``-th patch token, skipping the CLS row."""
    return nx.slice2d(x, rows=slice(1, None, cfg.patch_stride))


def project_tokens(spd_tokens: Tensor, patch_tokens: Tensor, params: layers.Params) -> Tensor:
    rows = nx.concat([spd_tokens, patch_tokens], axis=0)
    return layers.mlp(rows, params, f"{PREFIX}.mlp")


def spd_forward(x: Tensor, params: layers.Params, cfg: SpdConfig) -> SpdOutput:
    out = spd_attention(x, params, cfg)
    out.projected = project_tokens(nx.concat(out.tokens, axis=0), select_patches(x, cfg), params)
    return out


def map_overlap(maps: list[np.ndarray]) -> float:
    """Plain-array version of the ordered-pair overlap, for reporting."""
    return float(sum(np.sum((a @ b.T) ** 2) for i, a in enumerate(maps) for j, b in enumerate(maps) if i != j))
