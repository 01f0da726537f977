"""Finite-difference checks for every differentiable op and for the full objective."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from structvit import numerics as nx
from structvit import spd
from structvit.model import layers
from structvit.model.config import RunConfig, tiny_preset
from structvit.model.objective import init_model, total_loss
from structvit.numerics import GradCheckReport, Tensor
from structvit.pipeline.synthetic import SyntheticDatasetSpec, generate_dataset
from structvit.supervision import ums_target

OP_TOL = 1e-6
END_TO_END_TOL = 1e-4
# Denominator floor for the op suite: entries below 1e-3 are held to an
# absolute error of OP_TOL * OP_FLOOR = 1e-9, about where central-difference
# roundoff sits for test functions of magnitude ~10.
OP_FLOOR = 1e-3


def _p(rng: np.random.Generator, shape, name: str, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[], Tensor]:
    """Random linear functional so every output entry contributes a distinct weight."""
    r = Tensor(rng.normal(size=out.shape))
    return lambda t: nx.sum_all(nx.mul(t, r))


def _shape(rng: np.random.Generator, lo: int = 1, hi: int = 5) -> int:
    return int(rng.integers(lo, hi + 1))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Scalar test functions, one per elementary op, with seeded random shapes."""
    rng = np.random.default_rng(seed)
    cases: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {}

    def add_case(name, build, params):
        probe = _project(build(), rng)
        cases[name] = (lambda: probe(build()), params)

    m, k, n = _shape(rng), _shape(rng), _shape(rng)
    a, b = _p(rng, (m, k), "a"), _p(rng, (k, n), "b")
    add_case("matmul", lambda: nx.matmul(a, b), [a, b])
    r, c_ = _shape(rng), _shape(rng, 2)
    c, d = _p(rng, (r, c_), "c"), _p(rng, (r, c_), "d")
    add_case("add", lambda: nx.add(c, d), [c, d])
    add_case("sub", lambda: nx.sub(c, d), [c, d])
    add_case("mul", lambda: nx.mul(c, d), [c, d])
    add_case("scale", lambda: nx.scale(c, -1.7), [c])
    row = _p(rng, (1, c_), "row")
    add_case("add_row", lambda: nx.add_row(c, row), [c, row])
    add_case("gelu", lambda: nx.gelu(c), [c])
    # two-column rows have near-zero variance too often for finite differences
    ln_x = _p(rng, (r, _shape(rng, 3, 6)), "ln_x")
    g, bias = _p(rng, (1, ln_x.shape[1]), "gain"), _p(rng, (1, ln_x.shape[1]), "bias")
    add_case("layer_norm", lambda: nx.layer_norm(ln_x, g, bias), [ln_x, g, bias])
    vocab, width = _shape(rng, 2, 7), _shape(rng)
    table = _p(rng, (vocab, width), "table")
    ids = rng.integers(0, vocab, size=_shape(rng, 1, 6))
    add_case("embedding", lambda: nx.embedding(table, ids), [table])
    add_case("transpose", lambda: nx.transpose(a), [a])
    hd = _shape(rng)
    q, kk = _p(rng, (_shape(rng), hd), "q"), _p(rng, (_shape(rng), hd), "k")
    add_case("scaled_dot", lambda: nx.scaled_dot(q, kk, hd), [q, kk])
    sr, sc = _shape(rng), _shape(rng, 2, 6)
    s = _p(rng, (sr, sc), "s")
    mask = rng.uniform(size=(sr, sc)) < 0.6
    mask[np.arange(sr), rng.integers(0, sc, size=sr)] = True  # keep every row non-empty
    add_case("softmax_rows", lambda: nx.softmax_rows(s), [s])
    add_case("softmax_rows_masked", lambda: nx.softmax_rows(s, mask), [s])
    tn, tv = _shape(rng), _shape(rng, 2, 8)
    logits = _p(rng, (tn, tv), "logits")
    targets, weights = rng.integers(0, tv, size=tn), rng.uniform(0.0, 2.0, size=tn)
    cases["weighted_cross_entropy"] = (lambda: nx.weighted_cross_entropy(logits, targets, weights), [logits])
    cases["frobenius_sq"] = (lambda: nx.frobenius_sq(c), [c])
    cases["sum_all"] = (lambda: nx.sum_all(nx.mul(c, c)), [c])
    e = _p(rng, (_shape(rng), c_), "e")
    add_case("concat_rows", lambda: nx.concat([c, e], axis=0), [c, e])
    f = _p(rng, (r, _shape(rng)), "f")
    add_case("concat_cols", lambda: nx.concat([c, f], axis=1), [c, f])
    add_case("slice2d", lambda: nx.slice2d(c, rows=slice(0, None, 2), cols=slice(1, None)), [c])
    cases["mean_of"] = (lambda: nx.mean_of([nx.frobenius_sq(c), nx.sum_all(d)]), [c, d])
    return cases


def composite_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Layer-level compositions (transformer block, projector, overlap penalty)."""
    rng = np.random.default_rng([seed, 1])
    cases: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {}
    x = _p(rng, (5, 4), "x")
    blk = layers.init_block("blk", 4, 6, rng, 0.5)
    for t in blk.values():
        t.requires_grad = True
    probe = _project(layers.block(x, blk, "blk", 2, None), rng)
    cases["transformer_block"] = (lambda: probe(layers.block(x, blk, "blk", 2, None)), [x, *blk.values()])
    cfg = spd.SpdConfig(num_groups=3, queries_per_group=2, heads=1, vit_dim=4, teacher_dim=3, init_std=0.5)
    sp = spd.init_spd(cfg, rng)
    for t in sp.values():
        t.requires_grad = True
    probe2 = _project(spd.spd_forward(x, sp, cfg).projected, rng)
    cases["spd_tokens"] = (lambda: probe2(spd.spd_forward(x, sp, cfg).projected), [x, *sp.values()])
    cases["ortho_loss"] = (lambda: spd.spd_attention(x, sp, cfg).ortho, [x, *sp.values()])
    return cases


def all_op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    return {**op_cases(seed), **composite_cases(seed)}


def run_op_checks(seed: int = 0, tol: float = OP_TOL) -> dict[str, GradCheckReport]:
    return {name: nx.grad_check(f, ps, tol=tol, floor=OP_FLOOR) for name, (f, ps) in all_op_cases(seed).items()}


def tiny_sample(run: RunConfig, seed: int):
    """One short synthetic sample that fits the tiny teacher."""
    spec = SyntheticDatasetSpec(
        num_samples=1,
        num_findings=4,
        image_size=run.model.vit.image_size,
        finding_names=("A", "B", "C", "D"),
        p_null=0.25,
        seed=seed,
    )
    ds = generate_dataset(spec)
    fields = ds.schema.finding_names[:2]
    return ds.images[0], ums_target(ds.records[0], fields)


def end_to_end_check(run: RunConfig | None = None, seed: int = 0, tol: float = END_TO_END_TOL) -> GradCheckReport:
    """Check L_tok + lambda * L_ortho against every trainable parameter on a 1-sample batch.

    The loss is several hundred nats while some gradient entries sit near
    zero, where central differences only resolve ~1e-9 in absolute terms, so
    the error is taken norm-wise per parameter tensor.
    """
    run = run or tiny_preset()
    model = init_model(run.model, seed)
    batch = [tiny_sample(run, seed)]
    return nx.grad_check(
        lambda: total_loss(model, batch, run.lambda_ortho).loss,
        list(model.trainable().values()),
        tol=tol,
        per_tensor=True,
    )


@dataclass
class SuiteReport:
    ops: dict[str, GradCheckReport] = field(default_factory=dict)
    end_to_end: GradCheckReport | None = None

    @property
    def passed(self) -> bool:
        ok = all(r.passed for r in self.ops.values())
        return ok and (self.end_to_end is None or self.end_to_end.passed)

    def to_dict(self) -> dict:
        def one(r: GradCheckReport) -> dict:
            worst = max(r.max_rel_err.values(), default=0.0)
            return {"passed": r.passed, "tol": r.tol, "max_rel_err": worst, "failures": r.failures}

        doc = {"passed": self.passed, "ops": {n: one(r) for n, r in sorted(self.ops.items())}}
        if self.end_to_end is not None:
            doc["end_to_end"] = one(self.end_to_end)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def run_suite(run: RunConfig | None = None, seed: int = 0) -> SuiteReport:
    return SuiteReport(run_op_checks(seed), end_to_end_check(run, seed))

