"""Run configuration with desk-scale and paper-scale presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping

from structvit.model.teacher import TeacherConfig
from structvit.model.vit import VitConfig
from structvit.spd import SpdConfig
from structvit.supervision import SUPERVISION_MODES


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    spd: SpdConfig = field(default_factory=SpdConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)

    def __post_init__(self) -> None:
        if self.spd.vit_dim != self.vit.dim:
            raise ConfigError("spd.vit_dim", f"must equal vit.dim ({self.vit.dim})")
        if self.spd.teacher_dim != self.teacher.dim:
            raise ConfigError("spd.teacher_dim", f"must equal teacher.dim ({self.teacher.dim})")

    @property
    def num_visual_tokens(self) -> int:
        return self.spd.num_tokens + self.spd.num_patch_tokens(self.vit.seq_len)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lambda_ortho: float = 0.01
    lr_vit: float = 1e-4
    lr_spd: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    warmup_frac: float = 0.03
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    supervision: str = "ums"
    k_range: tuple[int, int] = (4, 6)
    low_freq_prob: float = 0.6
    teacher_seed: int = 0
    teacher_pretrain_steps: int = 1500
    teacher_lr: float = 3e-3
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if not self.lr_vit > 0:
            raise ConfigError("lr_vit", "must be > 0")
        if not self.lr_spd > 0:
            raise ConfigError("lr_spd", "must be > 0")
        if not self.teacher_lr > 0:
            raise ConfigError("teacher_lr", "must be > 0")
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.lambda_ortho >= 0:
            raise ConfigError("lambda_ortho", "must be >= 0")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError("supervision", f"must be one of {SUPERVISION_MODES}")
        kmin, kmax = self.k_range
        if not 1 <= kmin <= kmax:
            raise ConfigError("k_range", "need 1 <= k_min <= k_max")
        if not 0.0 <= self.low_freq_prob <= 1.0:
            raise ConfigError("low_freq_prob", "must lie in [0, 1]")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac", "must lie in [0, 1)")
        if self.teacher_pretrain_steps < 0:
            raise ConfigError("teacher_pretrain_steps", "must be >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``doc`` on ``base`` (default: desk preset); unknown keys are errors."""
        base = base or desk_preset()
        return _overlay(base, doc, "")


def _overlay(obj, doc: Mapping[str, Any], path: str):
    if not isinstance(doc, Mapping):
        raise ConfigError(path.rstrip(".") or "config", "must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, val in doc.items():
        where = f"{path}{key}"
        if key not in fields:
            raise ConfigError(where, "unknown field")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            changes[key] = _overlay(cur, val, where + ".")
            continue
        if isinstance(cur, tuple):
            if not isinstance(val, (list, tuple)) or len(val) != len(cur):
                raise ConfigError(where, f"must be a list of {len(cur)} numbers")
            val = tuple(type(c)(v) for c, v in zip(cur, val))
        elif isinstance(cur, bool) or isinstance(val, bool):
            if not isinstance(val, bool) or not isinstance(cur, bool):
                raise ConfigError(where, f"expected {type(cur).__name__}")
        elif isinstance(cur, int):
            if not isinstance(val, int):
                raise ConfigError(where, "expected an integer")
        elif isinstance(cur, float):
            if not isinstance(val, (int, float)):
                raise ConfigError(where, "expected a number")
            val = float(val)
        elif isinstance(cur, str) and not isinstance(val, str):
            raise ConfigError(where, "expected a string")
        changes[key] = val
    try:
        return dataclasses.replace(obj, **changes)
    except ConfigError as exc:
        raise ConfigError(f"{path}{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except ValueError as exc:
        raise ConfigError(path.rstrip(".") or "config", str(exc)) from None


def desk_preset(**overrides) -> RunConfig:
    return RunConfig(**overrides)


def paper_preset(**overrides) -> RunConfig:
    """Reference values at paper scale (ViT-B/16, 1536-wide teacher); not meant to run on a CPU."""
    model = ModelConfig(
        vit=VitConfig(image_size=224, patch_size=16, dim=768, depth=12, heads=12, mlp_hidden=3072),
        spd=SpdConfig(num_groups=4, queries_per_group=2, heads=4, vit_dim=768, teacher_dim=1536, patch_stride=25),
        teacher=TeacherConfig(dim=1536, depth=2, heads=12, mlp_hidden=4 * 1536, max_len=1024),
    )
    base = dict(model=model, lr_vit=2e-5, lr_spd=1e-4, batch_size=32, steps=10_000)
    base.update(overrides)
    return RunConfig(**base)


def tiny_preset(**overrides) -> RunConfig:
    """Smallest configuration; used for end-to-end finite-difference checks."""
    # a wide init keeps attention logits away from zero, where many gradient
    # entries would fall below finite-difference resolution
    std = 0.5
    model = ModelConfig(
        vit=VitConfig(image_size=16, patch_size=8, dim=8, depth=1, heads=2, mlp_hidden=8, init_std=std),
        spd=SpdConfig(num_groups=4, queries_per_group=2, heads=1, vit_dim=8, teacher_dim=8, patch_stride=2, init_std=std),
        teacher=TeacherConfig(dim=8, depth=1, heads=2, mlp_hidden=8, max_len=160, init_std=std),
    )
    base = dict(model=model, steps=1, batch_size=1, teacher_pretrain_steps=0)
    base.update(overrides)
    return RunConfig(**base)
