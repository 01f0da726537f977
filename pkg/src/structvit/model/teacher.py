"""Frozen decoder-only language model that scores teacher-forced targets.

Input layout per sample::

    [visual tokens][SEP][instruction bytes][SEP][target[:-1]]

The visual and instruction prefix is fully visible to every position; target
positions are causal among themselves. The output head is tied to the token
embedding table.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from structvit import numerics as nx
from structvit.model import layers
from structvit.numerics import Tensor
from structvit.ums import PAD, SEP, VOCAB_SIZE

PREFIX = "teacher"


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_hidden: int = 128
    max_len: int = 512
    vocab_size: int = VOCAB_SIZE
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError("teacher dim must be divisible by heads")
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"teacher vocabulary is the {VOCAB_SIZE}-symbol byte vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)


def init_teacher(cfg: TeacherConfig, rng: np.random.Generator) -> layers.Params:
    p: layers.Params = {}
    p[f"{PREFIX}.tok_emb"] = layers.normal(rng, (cfg.vocab_size, cfg.dim), cfg.init_std, f"{PREFIX}.tok_emb")
    p[f"{PREFIX}.pos_emb"] = layers.normal(rng, (cfg.max_len, cfg.dim), cfg.init_std, f"{PREFIX}.pos_emb")
    for i in range(cfg.depth):
        p.update(layers.init_block(f"{PREFIX}.block{i}", cfg.dim, cfg.mlp_hidden, rng, cfg.init_std))
    p.update(layers.init_norm(f"{PREFIX}.ln_f", cfg.dim))
    return p


def freeze(params: layers.Params) -> None:
    for t in params.values():
        t.requires_grad = False
        t.zero_grad()


def checksum(params: layers.Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].value).tobytes())
    return h.hexdigest()


@functools.lru_cache(maxsize=64)
def _cached_bias(prefix_len: int, total: int) -> np.ndarray:
    bias = nx.additive_mask(prefix_causal_mask(prefix_len, total))
    bias.flags.writeable = False
    return bias


def prefix_causal_mask(prefix_len: int, total: int) -> np.ndarray:
    """mask[i, j] is True where position i may attend to position j."""
    j = np.arange(total)
    i = j[:, None]
    return (j[None, :] < prefix_len) | (j[None, :] <= i)


def teacher_forward(
    visual: Tensor,
    instruction_ids,
    target_ids,
    params: layers.Params,
    cfg: TeacherConfig,
    target_weights=None,
) -> Tensor:
    """Next-token logits of shape (len(target_ids) - 1, vocab) for the target positions.

    Where ``target_weights`` is zero the input token is replaced by PAD, so the
    content of masked spans cannot reach any other position.
    """
    if visual.value.ndim != 2 or visual.shape[1] != cfg.dim:
        raise nx.DimensionError(f"visual tokens must have width {cfg.dim}, got {visual.shape}")
    tgt = np.asarray(target_ids, dtype=np.int64)
    if tgt.size < 2:
        raise ValueError("target needs at least two tokens")
    inputs = tgt[:-1].copy()
    if target_weights is not None:
        w = np.asarray(target_weights)
        inputs[w[:-1] == 0] = PAD
    text_ids = np.concatenate([[SEP], np.asarray(instruction_ids, dtype=np.int64), [SEP], inputs])
    n_vis = visual.shape[0]
    total = n_vis + text_ids.size
    if total > cfg.max_len:
        raise SequenceLengthError(f"sequence of {total} positions exceeds teacher capacity {cfg.max_len}")
    prefix = total - inputs.size

    emb = params[f"{PREFIX}.tok_emb"]
    x = nx.concat([visual, nx.embedding(emb, text_ids)], axis=0)
    x = nx.add(x, nx.slice2d(params[f"{PREFIX}.pos_emb"], rows=slice(0, total)))
    mask = _cached_bias(prefix, total)
    for i in range(cfg.depth):
        x = layers.block(x, params, f"{PREFIX}.block{i}", cfg.heads, mask)
    h = layers.norm(nx.slice2d(x, rows=slice(prefix, total)), params, f"{PREFIX}.ln_f")
    return nx.matmul(h, nx.transpose(emb))
