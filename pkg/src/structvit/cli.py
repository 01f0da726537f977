"""Command-line entry point.

Every subcommand reads at most one JSON config, takes paths and the seed as
flags, and writes its artifacts into ``--out``. Exit status: 0 on success,
2 for invalid configuration or usage, 1 for any runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("structvit")


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit status 2."""


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def _run_config(args, base):
    from structvit.model.config import ConfigError, RunConfig

    doc = _read_json(args.config)
    try:
        run = RunConfig.from_dict(doc, base=base)
        if args.seed is not None:
            run = run.replace(seed=args.seed)
        if getattr(args, "steps", None) is not None:
            run = run.replace(steps=args.steps)
    except ConfigError as exc:
        raise UsageError(f"invalid config field {exc}") from None
    return run


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return Path(args.out)


def _write_text(path: Path, text: str) -> None:
    from structvit.model.checkpoint import atomic_write_bytes

    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_convert(args) -> int:
    from structvit import ums

    schema = None
    if args.schema:
        try:
            schema = ums.SchemaConfig.load(args.schema)
        except (ums.SchemaError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"invalid schema {args.schema}: {exc}") from None
    schema, records = ums.read_label_csv(args.csv, schema)
    schema = ums.SchemaConfig(schema.finding_names, ums.compute_prevalence(records, schema))
    out = _out_dir(args)
    _write_text(out / "labels.jsonl", "".join(ums.jsonl_line(r) + "\n" for r in records))
    _write_text(out / "schema.json", schema.to_json() + "\n")
    log.info("converted %d rows", len(records))
    return 0


def cmd_gen_data(args) -> int:
    import dataclasses

    from structvit.pipeline import synthetic

    doc = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = synthetic.spec_from_json(json.dumps(doc))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dataset config: {exc}") from None
    ds = synthetic.generate_dataset(spec)
    out = _out_dir(args)
    synthetic.save_dataset(ds, out)
    _write_text(out / "spec.json", json.dumps(dataclasses.asdict(spec), sort_keys=True) + "\n")
    return 0


def _teacher_arrays(path: str, run) -> dict[str, np.ndarray]:
    from structvit.model.checkpoint import load_container
    from structvit.model.objective import init_model

    tensors, _ = load_container(path)
    want = init_model(run.model, run.seed).teacher_params
    out = {}
    for name, t in want.items():
        if name not in tensors:
            raise UsageError(f"{path} has no tensor {name}")
        if tensors[name].shape != t.shape:
            raise UsageError(f"{path}: {name} has shape {tensors[name].shape}, config needs {t.shape}")
        out[name] = tensors[name]
    return out


def cmd_train(args) -> int:
    from structvit.model.config import desk_preset
    from structvit.model.objective import load_checkpoint
    from structvit.pipeline import synthetic
    from structvit.pipeline.train import train

    run = _run_config(args, desk_preset())
    if args.data is None:
        raise UsageError("--data is required")
    ds = synthetic.load_dataset(args.data)
    out = _out_dir(args)
    state = None
    if args.resume:
        state = load_checkpoint(out / "checkpoint.vivd")
        if args.steps is not None and args.steps != state.run.steps:
            # the schedule's total length is part of the saved optimizer state
            raise UsageError(f"--steps {args.steps} conflicts with the resumed run's {state.run.steps} steps")
        run = state.run
    teacher = _teacher_arrays(args.teacher, run) if args.teacher and state is None else None
    res = train(run, ds, out, state=state, teacher_arrays=teacher)
    if res.log:
        log.info("step %d loss_tok %.4f", res.log[-1]["step"], res.log[-1]["loss_tok"])
    return 0


def cmd_probe(args) -> int:
    from structvit.pipeline import synthetic
    from structvit.pipeline.probe import linear_probe, save_head, write_result

    if args.backbone is None or args.data is None:
        raise UsageError("--backbone and --data are required")
    ds = synthetic.load_dataset(args.data)
    seed = 0 if args.seed is None else args.seed
    result, head = linear_probe(args.backbone, ds, steps=args.steps, seed=seed, lr=args.lr, shuffle_labels=args.shuffle_labels)
    out = _out_dir(args)
    save_head(out / "probe_head.vivd", head, list(ds.schema.finding_names))
    write_result(out / "probe.json", result)
    log.info("macro-AUC %.4f macro-F1 %.4f", result.macro_auc, result.macro_f1)
    return 0


def cmd_eval(args) -> int:
    from structvit.pipeline import synthetic
    from structvit.pipeline.probe import evaluate_backbone, write_result

    if args.backbone is None or args.head is None or args.data is None:
        raise UsageError("--backbone, --head and --data are required")
    result = evaluate_backbone(args.backbone, args.head, synthetic.load_dataset(args.data))
    write_result(_out_dir(args) / "eval.json", result)
    return 0


def cmd_gradcheck(args) -> int:
    from structvit.model.config import tiny_preset
    from structvit.pipeline.gradcheck import run_suite

    run = _run_config(args, tiny_preset())
    report = run_suite(run, run.seed)
    out = _out_dir(args)
    _write_text(out / "gradcheck.json", report.to_json())
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_attn_dump(args) -> int:
    from structvit.pipeline import synthetic
    from structvit.pipeline.attention import export_attention

    if args.checkpoint is None or args.data is None:
        raise UsageError("--checkpoint and --data are required")
    ds = synthetic.load_dataset(args.data)
    export_attention(args.checkpoint, ds.images[: args.num_images], _out_dir(args))
    return 0


def cmd_export_backbone(args) -> int:
    from structvit.model.checkpoint import export_backbone

    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    export_backbone(args.checkpoint, _out_dir(args) / "backbone.vivd")
    return 0


COMMANDS = {
    "convert": cmd_convert,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "attn-dump": cmd_attn_dump,
    "export-backbone": cmd_export_backbone,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="structvit", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert", parents=[common], help="label CSV -> UMS JSONL")
    s.add_argument("--csv", required=True)
    s.add_argument("--schema", help="schema JSON; default: CSV header order")

    sub.add_parser("gen-data", parents=[common], help="write a synthetic planted-signal dataset")

    s = sub.add_parser("train", parents=[common], help="train encoder and projector")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--steps", type=int, help="overrides the config step count")
    s.add_argument("--teacher", help="take the frozen teacher tensors from this file instead of warm-starting one")
    s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.vivd with its saved config")

    s = sub.add_parser("probe", parents=[common], help="linear probe on an exported backbone")
    s.add_argument("--backbone")
    s.add_argument("--data")
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--shuffle-labels", action="store_true", help="leakage check: permute labels first")

    s = sub.add_parser("eval", parents=[common], help="score a dataset with a trained probe head")
    s.add_argument("--backbone")
    s.add_argument("--head")
    s.add_argument("--data")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")

    s = sub.add_parser("attn-dump", parents=[common], help="write per-group attention maps")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--num-images", type=int, default=4)

    s = sub.add_parser("export-backbone", parents=[common], help="strip projector and teacher from a checkpoint")
    s.add_argument("--checkpoint")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        from structvit.pipeline.probe import worker_count

        worker_count()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
