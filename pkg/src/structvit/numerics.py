"""Dense f64 tensors with tape-based reverse-mode differentiation.

Only the operations the encoder, projector and teacher need are provided.
Every op checks shapes explicitly; the only broadcasting is scalar-times-tensor
and the explicit ``add_row`` bias op.

Recording happens onto the tape that is active in the current context::

    with Tape() as tape:
        loss = weighted_cross_entropy(logits, targets, weights)
    tape.backward(loss)

Outside a ``Tape`` context ops run forward only.
"""

from __future__ import annotations

import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericDomainError",
    "Tensor",
    "Tape",
    "GradCheckReport",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "gelu",
    "layer_norm",
    "embedding",
    "transpose",
    "scaled_dot",
    "softmax_rows",
    "additive_mask",
    "weighted_cross_entropy",
    "frobenius_sq",
    "concat",
    "slice2d",
    "sum_all",
    "mean_of",
]


class DimensionError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    pass


_node_ids = itertools.count()
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("_active_tape", default=None)


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("value", "_grad", "requires_grad", "node_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.value = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.value = arr
        t._grad = None
        t.requires_grad = requires_grad
        t.node_id = next(_node_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise DimensionError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a single entry, got shape {self.value.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered log of differentiable operations.

    A tape is single-threaded; use one tape per thread.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded t that requires grad.

        Intermediate adjoints are rebuilt on every call, so calling twice
        adds the gradient twice.
        """
        if seed is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss or explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.value)
        adjoint: dict[int, np.ndarray] = {loss.node_id: np.asarray(seed, dtype=np.float64)}
        touched: dict[int, Tensor] = {loss.node_id: loss}
        for rec in reversed(self.records):
            g_out = adjoint.pop(rec.output.node_id, None)
            if g_out is None:
                continue
            grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                prev = adjoint.get(t.node_id)
                adjoint[t.node_id] = g if prev is None else prev + g
                touched[t.node_id] = t
        # whatever remains are leaves (never produced by a recorded op)
        for nid, g in adjoint.items():
            t = touched[nid]
            if t.requires_grad:
                t.grad += g


def _record(out_value: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_value, needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.records.append(_Record(inputs, out, backward))
    return out


def _check_2d(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.value.ndim != 2:
            raise DimensionError(f"{name} expects 2-D tensors, got shape {t.shape}")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"{name}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (
            g @ bv.T if a.requires_grad else None,
            av.T @ g if b.requires_grad else None,
        )

    return _record(av @ bv, (a, b), backward)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x[i, :] + row for every i; ``row`` has shape (n,) or (1, n)."""
    _check_2d("add_row", x)
    r = row.value.reshape(-1)
    if r.shape[0] != x.shape[1]:
        raise DimensionError(f"add_row: row of length {r.shape[0]} for matrix {x.shape}")
    row_shape = row.shape

    def backward(g):
        return g, g.sum(axis=0).reshape(row_shape)

    return _record(x.value + r, (x, row), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.value
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + th)

    def backward(g):
        d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * (_GELU_C * (1.0 + 3 * 0.044715 * v2))
        return (g * d,)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check_2d("layer_norm", x)
    n = x.shape[1]
    if gain.size != n or bias.size != n:
        raise DimensionError(f"layer_norm: gain/bias sizes {gain.size}/{bias.size} for width {n}")
    v = x.value
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value.reshape(-1)
    out = xhat * gv + bias.value.reshape(-1)

    def backward(g):
        dxhat = g * gv
        dx = None
        if x.requires_grad:
            dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        dgain = (g * xhat).sum(axis=0).reshape(gain.shape) if gain.requires_grad else None
        dbias = g.sum(axis=0).reshape(bias.shape) if bias.requires_grad else None
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), backward)


def embedding(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    _check_2d("embedding", table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("embedding ids must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(table.value[idx], (table,), backward)


def transpose(x: Tensor) -> Tensor:
    _check_2d("transpose", x)
    return _record(x.value.T.copy(), (x,), lambda g: (g.T,))


def scaled_dot(q: Tensor, k: Tensor, head_dim: int) -> Tensor:
    """(q @ k.T) / sqrt(head_dim)."""
    _check_2d("scaled_dot", q, k)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"scaled_dot width mismatch: {q.shape} vs {k.shape}")
    c = 1.0 / math.sqrt(head_dim)
    qv, kv = q.value, k.value

    def backward(g):
        return (
            (g @ kv) * c if q.requires_grad else None,
            (g.T @ qv) * c if k.requires_grad else None,
        )

    return _record((qv @ kv.T) * c, (q, k), backward)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; entries where ``mask`` is False get probability 0.

    ``mask`` may also be given as an additive float array of 0 / -inf.
    """
    _check_2d("softmax_rows", x)
    v = x.value
    if not np.isfinite(v).all():
        raise NumericDomainError("softmax_rows: non-finite input")
    if mask is not None:
        if mask.shape != v.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != {v.shape}")
        bias = mask if mask.dtype != np.bool_ else additive_mask(mask)
        v = v + bias
    e = np.exp(v - v.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    if mask is not None and not np.isfinite(p).all():
        raise NumericDomainError("softmax_rows: a row is fully masked")

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (x,), backward)


def additive_mask(mask: np.ndarray) -> np.ndarray:
    """Boolean keep-mask -> 0 / -inf additive bias."""
    bias = np.zeros(mask.shape)
    bias[~mask] = -np.inf
    return bias


def weighted_cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray, weights: Sequence[float] | np.ndarray) -> Tensor:
    """-sum_t w_t log softmax(logits_t)[y_t]; zero-weight rows are never evaluated."""
    _check_2d("weighted_cross_entropy", logits)
    tgt = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    T, V = logits.shape
    if tgt.shape != (T,) or w.shape != (T,):
        raise DimensionError(f"targets/weights must have length {T}, got {tgt.shape}/{w.shape}")
    if T and (tgt.min() < 0 or tgt.max() >= V):
        raise IndexError(f"target id out of vocabulary [0, {V})")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    live = np.flatnonzero(w)
    z = logits.value[live]
    _check_finite("weighted_cross_entropy", z)
    zmax = z.max(axis=1, keepdims=True) if live.size else np.zeros((0, 1))
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z[np.arange(live.size), tgt[live]] - lse[:, 0]
    wl = w[live]
    loss = -float(np.dot(wl, logp)) if live.size else 0.0

    def backward(g):
        grad = np.zeros((T, V))
        if live.size:
            p = np.exp(z - lse)
            p[np.arange(live.size), tgt[live]] -= 1.0
            grad[live] = p * (wl[:, None] * g)
        return (grad,)

    return _record(np.array(loss), (logits,), backward)


def frobenius_sq(x: Tensor) -> Tensor:
    v = x.value
    return _record(np.array(float(np.sum(v * v))), (x,), lambda g: (2.0 * g * v,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.array(float(x.value.sum())), (x,), lambda g: (np.full(shape, float(g)),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(ts)
    if not ts:
        raise DimensionError("concat of nothing")
    _check_2d("concat", *ts)
    other = 1 - axis
    if len({t.shape[other] for t in ts}) != 1:
        raise DimensionError(f"concat axis={axis} mismatch: {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        if axis == 0:
            return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(ts)))
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts)))

    return _record(np.concatenate([t.value for t in ts], axis=axis), ts, backward)


def slice2d(x: Tensor, rows: slice = slice(None), cols: slice = slice(None)) -> Tensor:
    _check_2d("slice2d", x)
    out = x.value[rows, cols]
    if out.size == 0:
        raise DimensionError(f"empty slice of {x.shape}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[rows, cols] = g
        return (gx,)

    return _record(out.copy(), (x,), backward)


def mean_of(scalars: Sequence[Tensor]) -> Tensor:
    scalars = list(scalars)
    if not scalars:
        raise ValueError("mean of an empty sequence")
    total = scalars[0]
    for s in scalars[1:]:
        total = add(total, s)
    return scale(total, 1.0 / len(scalars))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def _eval_at(f: Callable[[], Tensor], flat: np.ndarray, j: int, x: float) -> float:
    flat[j] = x
    try:
        return f().item()
    except (NumericDomainError, FloatingPointError):
        return math.nan


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e <= self.tol for e in self.max_rel_err.values())

    def summary(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in self.max_rel_err.items()]
        lines += [f"FAIL {f}" for f in self.failures]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-8,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    per_tensor: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps near-zero gradients from dividing by ~0. With ``per_tensor`` the
    error is norm-wise per parameter, ``||a - n|| / max(||a||, ||n||, floor)``,
    which stays meaningful when a large loss has many tiny gradient entries
    below finite-difference resolution. ``max_entries`` checks a random
    subset of each parameter.
    """
    params = list(params)
    saved = [p._grad for p in params]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p._grad = g

    report = GradCheckReport(eps=eps, tol=tol)
    rng = rng or np.random.default_rng(0)
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        a_vec = analytic[i].reshape(-1)[idx]
        n_vec = np.zeros(idx.size)
        for pos, j in enumerate(idx):
            orig = flat[j]
            fp, fm = _eval_at(f, flat, j, orig + eps), _eval_at(f, flat, j, orig - eps)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.failures.append(f"{name}[{j}]: non-finite value at perturbed point")
                continue
            n_vec[pos] = num = (fp - fm) / (2 * eps)
            a = a_vec[pos]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        if per_tensor:
            na, nn = np.linalg.norm(a_vec), np.linalg.norm(n_vec)
            worst = float(np.linalg.norm(a_vec - n_vec) / max(na, nn, floor))
        report.max_rel_err[name] = worst
    return report
