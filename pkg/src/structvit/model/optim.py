"""AdamW with per-group peak learning rates and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from structvit.numerics import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


def lr_factor(step: int, total_steps: int, warmup_frac: float = 0.03) -> float:
    """Multiplier in [0, 1]: linear warmup from 0, then cosine decay to 0 at the last step."""
    if total_steps <= 1:
        return 1.0
    warmup = max(1, math.ceil(warmup_frac * total_steps)) if warmup_frac > 0 else 0
    if step < warmup:
        return step / warmup
    last = total_steps - 1
    if last <= warmup:
        return 1.0
    progress = min(1.0, (step - warmup) / (last - warmup))
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    """Decoupled weight decay Adam over named tensors.

    ``groups`` maps a parameter-name prefix to its peak learning rate.
    """

    groups: dict[str, float]
    total_steps: int
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.03
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def peak_lr(self, name: str) -> float:
        for prefix, lr in self.groups.items():
            if name == prefix or name.startswith(prefix + "."):
                return lr
        raise KeyError(f"parameter {name!r} belongs to no optimizer group")

    def lr(self, group: str, step: int) -> float:
        return self.groups[group] * lr_factor(step, self.total_steps, self.warmup_frac)

    def step(self, params: Mapping[str, Tensor], step_index: int) -> None:
        """Update every trainable tensor in place from its ``.grad``; gradients are left untouched."""
        live = {n: p for n, p in params.items() if p.requires_grad}
        for n, p in live.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {n}; step {step_index} rejected")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        factor = lr_factor(step_index, self.total_steps, self.warmup_frac)
        for n, p in live.items():
            g = p.grad
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(p.value)
                self.v[n] = np.zeros_like(p.value)
            v = self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = self.peak_lr(n) * factor
            if lr == 0.0:
                continue
            if self.weight_decay:
                p.value -= lr * self.weight_decay * p.value
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[len("optim.m."):]: np.array(a) for k, a in arrays.items() if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: np.array(a) for k, a in arrays.items() if k.startswith("optim.v.")}
