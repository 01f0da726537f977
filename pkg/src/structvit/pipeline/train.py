"""Teacher warm start and the main training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from structvit import numerics as nx
from structvit.model import teacher as teacher_mod
from structvit.model.checkpoint import atomic_write_bytes, export_backbone
from structvit.model.config import RunConfig
from structvit.model.objective import (
    StructModel,
    TrainingState,
    init_model,
    make_optimizer,
    save_checkpoint,
    total_loss,
)
from structvit.model.optim import AdamW
from structvit.pipeline.synthetic import Dataset
from structvit.supervision import SUPERVISION_MODES, Target, make_target
from structvit.ums import FindingState, SchemaConfig, sample_fields

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


def effective_k_range(run: RunConfig, schema: SchemaConfig) -> tuple[int, int]:
    """Clamp the field-count range to schemas smaller than k_max."""
    n = len(schema.finding_names)
    return min(run.k_range[0], n), min(run.k_range[1], n)


def draw_target(ds: Dataset, j: int, run: RunConfig, rng: np.random.Generator, mode: str | None = None) -> Target:
    fields = sample_fields(ds.schema, rng, effective_k_range(run, ds.schema), run.low_freq_prob)
    return make_target(ds.records[j], fields, mode or run.supervision, rng)


def make_batch(ds: Dataset, run: RunConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, Target]]:
    idx = rng.choice(len(ds), size=min(run.batch_size, len(ds)), replace=False)
    return [(ds.images[j], draw_target(ds, int(j), run, rng)) for j in idx]


# ---------------------------------------------------------------------------
# teacher warm start
# ---------------------------------------------------------------------------


def fact_codes(schema: SchemaConfig, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed random codes for finding identity and for each of the four states."""
    rng = np.random.default_rng([seed, 4])
    return rng.normal(size=(len(schema.finding_names), dim)), rng.normal(size=(len(_STATE_ORDER), dim))


_STATE_ORDER = tuple(FindingState)


def fact_prefix(record, schema: SchemaConfig, codes, n_slots: int, rng: np.random.Generator, noise: float = 0.3) -> np.ndarray:
    """Visual-slot stand-in: one (finding + state) code per finding in a random slot, noise elsewhere."""
    finding_codes, state_codes = codes
    dim = finding_codes.shape[1]
    slots = rng.normal(0.0, 1.0, size=(n_slots, dim))
    names = schema.finding_names
    where = rng.choice(n_slots, size=len(names), replace=False)
    for i, name in enumerate(names):
        s = _STATE_ORDER.index(record.findings[name])
        slots[where[i]] = finding_codes[i] + state_codes[s] + rng.normal(0.0, noise, size=dim)
    return slots


def pretrain_teacher(model: StructModel, ds: Dataset, run: RunConfig) -> list[float]:
    """Warm-start the teacher as a conditional language model, then freeze it.

    The visual slots carry fixed random codes for the record's (finding, state)
    facts, so the teacher learns the target grammar in both supervision styles
    and learns to read facts from its prefix. The codes are discarded
    afterwards; the student has to find its own way of expressing the facts.
    Deterministic in ``run.teacher_seed``.
    """
    params = model.teacher_params
    if run.teacher_pretrain_steps == 0:
        teacher_mod.freeze(params)
        return []
    for t in params.values():
        t.requires_grad = True
    rng = np.random.default_rng([run.teacher_seed, 3])
    cfg = model.cfg.teacher
    n_vis = model.cfg.num_visual_tokens
    if n_vis < len(ds.schema.finding_names):
        raise ValueError("fewer visual slots than findings")
    codes = fact_codes(ds.schema, cfg.dim, run.teacher_seed)
    opt = AdamW({teacher_mod.PREFIX: run.teacher_lr}, total_steps=run.teacher_pretrain_steps, weight_decay=0.0)
    losses = []
    for step in range(run.teacher_pretrain_steps):
        idx = rng.choice(len(ds), size=min(run.batch_size, len(ds)), replace=False)
        for t in params.values():
            t.zero_grad()
        with nx.Tape() as tape:
            per = []
            for j in idx:
                mode = SUPERVISION_MODES[int(rng.integers(len(SUPERVISION_MODES)))]
                tgt = draw_target(ds, int(j), run, rng, mode)
                visual = nx.Tensor(fact_prefix(ds.records[j], ds.schema, codes, n_vis, rng))
                logits = teacher_mod.teacher_forward(
                    visual, tgt.instruction_ids, tgt.seq.token_ids, params, cfg, target_weights=tgt.seq.weights
                )
                w = tgt.seq.weights[1:]
                per.append(nx.scale(nx.weighted_cross_entropy(logits, tgt.seq.token_ids[1:], w), 1.0 / max(w.sum(), 1.0)))
            loss = nx.mean_of(per)
        tape.backward(loss)
        opt.step(params, step)
        losses.append(loss.item())
    teacher_mod.freeze(params)
    return losses


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainingState
    log: list[dict] = field(default_factory=list)
    teacher_pretrain_losses: list[float] = field(default_factory=list)


def init_state(run: RunConfig, ds: Dataset, teacher_arrays: dict[str, np.ndarray] | None = None) -> tuple[TrainingState, list[float]]:
    model = init_model(run.model, run.seed)
    if teacher_arrays is not None:
        for n, t in model.teacher_params.items():
            t.value = np.array(teacher_arrays[n])
        pre = []
    else:
        pre = pretrain_teacher(model, ds, run)
    rng = np.random.Generator(np.random.PCG64(run.seed))
    return TrainingState(run, model, make_optimizer(run), 0, rng.bit_generator.state), pre


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def train(
    run: RunConfig,
    ds: Dataset,
    out_dir: str | Path | None = None,
    state: TrainingState | None = None,
    teacher_arrays: dict[str, np.ndarray] | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run (or resume) training up to ``stop_at`` (default ``run.steps``).

    With ``out_dir`` set, writes ``metrics.jsonl``, ``checkpoint.vivd`` and
    ``backbone.vivd`` there; a non-finite loss aborts, keeping the last good
    checkpoint on disk.
    """
    pre: list[float] = []
    if state is None:
        state, pre = init_state(run, ds, teacher_arrays)
    model, opt = state.model, state.optimizer
    rng = _rng_from_state(state.rng_state)
    out = Path(out_dir) if out_dir is not None else None
    end = run.steps if stop_at is None else min(stop_at, run.steps)
    entries: list[dict] = []
    trainable = model.trainable()
    for step in range(state.step, end):
        batch = make_batch(ds, run, rng)
        model.zero_grad()
        with nx.Tape() as tape:
            parts = total_loss(model, batch, run.lambda_ortho)
        if not math.isfinite(parts.loss.item()):
            if out is not None and not (out / "checkpoint.vivd").exists():
                save_checkpoint(out / "checkpoint.vivd", state)
            raise TrainingAborted(f"non-finite loss at step {step}")
        tape.backward(parts.loss)
        opt.step(trainable, step)
        entry = {
            "step": step,
            "loss": parts.loss.item(),
            "loss_tok": parts.tok.item(),
            "loss_ortho": parts.ortho.item(),
            "lr_vit": opt.lr(next(iter(opt.groups)), step),
            "lr_spd": opt.lr(list(opt.groups)[1], step),
        }
        entries.append(entry)
        state.step = step + 1
        state.rng_state = rng.bit_generator.state
        if out is not None and run.checkpoint_every and state.step % run.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.vivd", state)
    model.zero_grad()
    state.rng_state = rng.bit_generator.state
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _append_metrics(out / "metrics.jsonl", entries, fresh=state.step == len(entries))
        save_checkpoint(out / "checkpoint.vivd", state)
        export_backbone(out / "checkpoint.vivd", out / "backbone.vivd")
    return TrainResult(state, entries, pre)


def _append_metrics(path: Path, entries: list[dict], fresh: bool) -> None:
    old = b"" if fresh or not path.exists() else path.read_bytes()
    new = "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries).encode("utf-8")
    atomic_write_bytes(path, old + new)


def smoothed(values: list[float], window: int = 20) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(v.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
