"""Encoder + projector + frozen teacher, the combined objective, and full checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from structvit import numerics as nx
from structvit import spd
from structvit.model import checkpoint, layers, teacher, vit
from structvit.model.config import ModelConfig, RunConfig
from structvit.model.optim import AdamW
from structvit.numerics import Tensor
from structvit.supervision import Target


@dataclass
class StructModel:
    cfg: ModelConfig
    params: layers.Params

    def group(self, prefix: str) -> layers.Params:
        return {n: t for n, t in self.params.items() if n.startswith(prefix + ".")}

    @property
    def vit_params(self) -> layers.Params:
        return self.group(vit.PREFIX)

    @property
    def spd_params(self) -> layers.Params:
        return self.group(spd.PREFIX)

    @property
    def teacher_params(self) -> layers.Params:
        return self.group(teacher.PREFIX)

    def trainable(self) -> layers.Params:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.value for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise checkpoint.CheckpointFormatError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for n, t in self.params.items():
            if arrays[n].shape != t.shape:
                raise checkpoint.CheckpointFormatError(f"{n}: shape {arrays[n].shape} != {t.shape}")
            t.value = np.array(arrays[n], dtype=np.float64)


def init_model(cfg: ModelConfig, seed: int) -> StructModel:
    """Seeded initialization; the teacher comes out frozen."""
    params: layers.Params = {}
    params.update(vit.init_vit(cfg.vit, np.random.default_rng([seed, 0])))
    params.update(spd.init_spd(cfg.spd, np.random.default_rng([seed, 1])))
    t = teacher.init_teacher(cfg.teacher, np.random.default_rng([seed, 2]))
    teacher.freeze(t)
    params.update(t)
    return StructModel(cfg, params)


@dataclass
class LossParts:
    loss: Tensor
    tok: Tensor
    ortho: Tensor
    spd_outputs: list[spd.SpdOutput]


def sample_logits(model: StructModel, image: np.ndarray, target: Target) -> tuple[Tensor, spd.SpdOutput]:
    x = vit.encode(image, model.params, model.cfg.vit)
    out = spd.spd_forward(x, model.params, model.cfg.spd)
    logits = teacher.teacher_forward(
        out.projected,
        target.instruction_ids,
        target.seq.token_ids,
        model.params,
        model.cfg.teacher,
        target_weights=target.seq.weights,
    )
    return logits, out


def total_loss(model: StructModel, batch: Sequence[tuple[np.ndarray, Target]], lambda_ortho: float) -> LossParts:
    """Batch mean of  -sum_t w_t log p(y_t | y_<t, image)  +  lambda * overlap penalty."""
    if not batch:
        raise ValueError("empty batch")
    toks, orthos, outs = [], [], []
    for image, target in batch:
        logits, out = sample_logits(model, image, target)
        seq = target.seq
        toks.append(nx.weighted_cross_entropy(logits, seq.token_ids[1:], seq.weights[1:]))
        orthos.append(out.ortho)
        outs.append(out)
    tok = nx.mean_of(toks)
    ortho = nx.mean_of(orthos)
    loss = tok if lambda_ortho == 0 else nx.add(tok, nx.scale(ortho, lambda_ortho))
    return LossParts(loss, tok, ortho, outs)


def make_optimizer(run: RunConfig) -> AdamW:
    return AdamW(
        groups={vit.PREFIX: run.lr_vit, spd.PREFIX: run.lr_spd},
        total_steps=run.steps,
        betas=run.betas,
        weight_decay=run.weight_decay,
        warmup_frac=run.warmup_frac,
    )


# ---------------------------------------------------------------------------
# full checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainingState:
    run: RunConfig
    model: StructModel
    optimizer: AdamW
    step: int
    rng_state: dict


def save_checkpoint(path: str | Path, state: TrainingState) -> None:
    tensors = dict(state.model.arrays())
    tensors.update(state.optimizer.state_arrays())
    meta = {
        "kind": "checkpoint",
        "backbone": False,
        "config": state.run.to_dict(),
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "rng_state": state.rng_state,
        "teacher_checksum": teacher.checksum(state.model.teacher_params),
    }
    checkpoint.save_container(path, tensors, meta)


def run_config_from_meta(doc: dict) -> RunConfig:
    return RunConfig.from_dict(doc, base=RunConfig())


def load_checkpoint(path: str | Path) -> TrainingState:
    tensors, meta = checkpoint.load_container(path)
    if meta.get("kind") != "checkpoint" or meta.get("backbone"):
        raise checkpoint.CheckpointFormatError("not a full training checkpoint")
    run = run_config_from_meta(meta["config"])
    model = init_model(run.model, run.seed)
    model.load_arrays({n: a for n, a in tensors.items() if not n.startswith("optim.")})
    opt = make_optimizer(run)
    opt.load_state_arrays({n: a for n, a in tensors.items() if n.startswith("optim.")}, int(meta["optimizer_t"]))
    return TrainingState(run, model, opt, int(meta["step"]), meta["rng_state"])
