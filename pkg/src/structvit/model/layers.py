"""Pre-norm transformer pieces shared by the encoder and the teacher."""

from __future__ import annotations

import numpy as np

from structvit import numerics as nx
from structvit.numerics import Tensor

Params = dict[str, Tensor]


def normal(rng: np.random.Generator, shape: tuple[int, ...], std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def zeros(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def init_norm(prefix: str, dim: int) -> Params:
    return {f"{prefix}.g": ones((dim,), f"{prefix}.g"), f"{prefix}.b": zeros((dim,), f"{prefix}.b")}


def init_block(prefix: str, dim: int, hidden: int, rng: np.random.Generator, std: float) -> Params:
    p: Params = {}
    p.update(init_norm(f"{prefix}.ln1", dim))
    for w in ("wq", "wk", "wv", "wo"):
        name = f"{prefix}.attn.{w}"
        p[name] = normal(rng, (dim, dim), std, name)
    p[f"{prefix}.attn.bo"] = zeros((dim,), f"{prefix}.attn.bo")
    p.update(init_norm(f"{prefix}.ln2", dim))
    p[f"{prefix}.mlp.w1"] = normal(rng, (dim, hidden), std, f"{prefix}.mlp.w1")
    p[f"{prefix}.mlp.b1"] = zeros((hidden,), f"{prefix}.mlp.b1")
    p[f"{prefix}.mlp.w2"] = normal(rng, (hidden, dim), std, f"{prefix}.mlp.w2")
    p[f"{prefix}.mlp.b2"] = zeros((dim,), f"{prefix}.mlp.b2")
    return p


def norm(x: Tensor, p: Params, prefix: str) -> Tensor:
    return nx.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add_row(y, b)


def mlp(x: Tensor, p: Params, prefix: str) -> Tensor:
    h = nx.gelu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None
) -> tuple[Tensor, list[Tensor]]:
    """Split columns into ``heads`` equal heads; returns concatenated outputs and per-head maps."""
    width = q.shape[1]
    if width % heads:
        raise nx.DimensionError(f"attention width {width} not divisible by {heads} heads")
    dh = width // heads
    outs, maps = [], []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        if heads == 1:
            qh, kh, vh = q, k, v
        else:
            qh, kh, vh = nx.slice2d(q, cols=cols), nx.slice2d(k, cols=cols), nx.slice2d(v, cols=cols)
        a = nx.softmax_rows(nx.scaled_dot(qh, kh, dh), mask)
        maps.append(a)
        outs.append(nx.matmul(a, vh))
    out = outs[0] if heads == 1 else nx.concat(outs, axis=1)
    return out, maps


def block(x: Tensor, p: Params, prefix: str, heads: int, mask: np.ndarray | None = None) -> Tensor:
    h = norm(x, p, f"{prefix}.ln1")
    q = nx.matmul(h, p[f"{prefix}.attn.wq"])
    k = nx.matmul(h, p[f"{prefix}.attn.wk"])
    v = nx.matmul(h, p[f"{prefix}.attn.wv"])
    att, _ = multi_head_attention(q, k, v, heads, mask)
    x = nx.add(x, linear(att, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"]))
    return nx.add(x, mlp(norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.mlp"))
