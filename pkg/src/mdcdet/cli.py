"""Command line entry point: ``mdcdet {generate,train,evaluate,ablate}``.

Every successful command writes ``manifest.json`` into its output
directory with the resolved configuration, the seed, the input and output
paths with their sha256 digests, and the wall-clock time.

Exit codes: 0 success, 2 usage, 3 bad input data, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .errors import CompatibilityError, InvariantViolation, MDCDetError, PlacementError, StreamFormatError
from .metrics import reports_to_csv
from .synth import StreamSpec, generate_stream, load_stream, save_stream
from .trainer import (
    COMPONENTS,
    TrainConfig,
    check_compatible,
    evaluate,
    load_checkpoint,
    pretrain_only,
    run_stream,
    with_components,
)

logger = logging.getLogger("mdcdet")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3, 4

DELTA_AXIS = (0.25, 0.50, 0.65, 0.85)
MEMORY_AXIS = ((50, 10), (100, 10), (100, 20), (200, 20))
AXES = ("components", "delta_bt", "memory")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed: int, inputs: Sequence[Path],
                   outputs: Sequence[Path], started: float) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _read_json_object(path: str, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise UsageError(f"{what} file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from err
    if not isinstance(data, dict):
        raise UsageError(f"{path}: {what} file must hold a flat key-value object")
    return data


def _load_stream(path: str | None):
    if path is None:
        raise UsageError("--stream is required")
    try:
        return load_stream(path)
    except FileNotFoundError as err:
        raise InputError(f"stream file not found: {path}") from err


# configuration ----------------------------------------------------------------------


def resolve_stream_spec(args) -> StreamSpec:
    """Defaults < ``--config`` file < flags."""
    values = _read_json_object(args.config, "spec") if args.config else {}
    flags = {
        "seed": args.seed,
        "n_tasks": args.tasks,
        "recurrence_rate": args.recurrence_rate,
        "train_per_task": args.train_per_task,
        "eval_per_task": args.eval_per_task,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    known = {f.name for f in fields(StreamSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown spec keys: {unknown}")
    try:
        spec = StreamSpec(**values)
    except (TypeError, ValueError, StreamFormatError) as err:
        raise UsageError(f"invalid stream spec: {err}") from err
    if spec.n_tasks < 1:
        raise UsageError("a stream needs at least one task")
    return spec


def resolve_train_config(args) -> TrainConfig:
    """Defaults < ``--config`` file < flags."""
    values = _read_json_object(args.config, "config") if args.config else {}
    flags = {
        "seed": args.seed,
        "delta_bt": args.delta_bt,
        "lambda_q": args.lambda_q,
        "n_units": args.nm,
        "mem_length": args.lm,
        "pretrain_epochs": args.pretrain_epochs,
    }
    if args.epochs is not None:
        flags["epochs_first"] = flags["epochs_later"] = args.epochs
    if args.no_bt:
        flags["use_bt"] = False
    if args.no_ql:
        flags["use_ql"] = False
    if args.no_mem:
        flags["use_memory"] = False
        flags["use_ql"] = False
    if args.log_timing:
        flags["log_timing"] = True
    if args.test_mode:
        flags["test_mode"] = True
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid training config: {err}") from err


# commands ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = time.time()
    spec = resolve_stream_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = generate_stream(spec)
    path = out / "stream.jsonl"
    save_stream(stream, path)
    write_manifest(out, "generate", asdict(spec), spec.seed, [], [path], started)
    logger.info("wrote %s (%d tasks)", path, len(stream.tasks))
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    config = resolve_train_config(args)
    if args.tasks is not None and args.tasks < 1:
        raise UsageError("--tasks must be at least 1")
    stream = _load_stream(args.stream)
    out = Path(args.out)
    reports = run_stream(stream, config, out, max_tasks=args.tasks)
    csv_path = out / "reports.csv"
    csv_path.write_text(reports_to_csv(reports), encoding="utf-8")
    outputs = sorted(out.glob("ckpt_task*.json")) + [out / "train_log.jsonl", out / "reports.json", csv_path]
    write_manifest(out, "train", asdict(config), config.seed, [Path(args.stream)], outputs, started)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    stream = _load_stream(args.stream)
    try:
        model = load_checkpoint(args.checkpoint)
    except FileNotFoundError as err:
        raise InputError(f"checkpoint not found: {args.checkpoint}") from err
    except (json.JSONDecodeError, KeyError, ValueError) as err:
        raise InputError(f"unreadable checkpoint {args.checkpoint}: {err}") from err
    check_compatible(model, stream)
    t = args.task if args.task is not None else model.trained_tasks
    if not 1 <= t <= len(stream.tasks):
        raise UsageError(f"--task must lie in 1..{len(stream.tasks)}")
    report = evaluate(model, stream, t)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / "report.json", out / "report.csv"
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    csv_path.write_text(reports_to_csv([report]), encoding="utf-8")
    write_manifest(out, "evaluate", asdict(model.config), model.config.seed,
                   [Path(args.stream), Path(args.checkpoint)], [json_path, csv_path], started)
    return EXIT_OK


def ablation_configs(axis: str, base: TrainConfig, n_tasks: int = 1) -> list[tuple[str, TrainConfig]]:
    if axis == "components":
        return [(name, with_components(base, name)) for name in COMPONENTS]
    full = with_components(base, "FT+Mem+BT+QL")
    if axis == "delta_bt":
        return [(f"delta_bt={d:.2f}", replace(full, delta_bt=d)) for d in DELTA_AXIS]
    if axis == "memory":
        runs = []
        for n, m in MEMORY_AXIS:
            units = -(-n // n_tasks) * n_tasks  # chunks must split evenly across tasks
            if units != n:
                logger.warning("rounding %d memory units up to %d for %d tasks", n, units, n_tasks)
            runs.append((f"nm={units},lm={m}", replace(full, n_units=units, mem_length=m)))
        return runs
    raise UsageError(f"unknown ablation axis {axis!r}; expected one of {list(AXES)}")


def cmd_ablate(args) -> int:
    started = time.time()
    base = resolve_train_config(args)
    if args.tasks is not None and args.tasks < 1:
        raise UsageError("--tasks must be at least 1")
    stream = _load_stream(args.stream)
    runs = ablation_configs(args.axis, base, len(stream.tasks))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # every configuration shares the seed, hence the same pretrained backbone
    backbone = pretrain_only(stream, base)
    rows = []
    for label, config in runs:
        logger.info("ablation run %s", label)
        reports = run_stream(stream, config, out / _slug(label), max_tasks=args.tasks, pretrained=backbone)
        for r in reports:
            rows += r.rows(label)
    csv_path = out / f"ablation_{args.axis}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config", "task", "metric", "value"])
        writer.writerows(rows)
    resolved = {"axis": args.axis, "base": asdict(base), "runs": {label: asdict(c) for label, c in runs}}
    write_manifest(out, "ablate", resolved, base.seed, [Path(args.stream)], [csv_path], started)
    return EXIT_OK


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.=," else "_" for ch in label.replace("+", "_"))


# parser -----------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stream", help="stream file written by `generate`")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat JSON object of TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--tasks", type=int, help="train only the first N tasks")
    p.add_argument("--epochs", type=int, help="epochs per task (all tasks)")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--delta-bt", type=float)
    p.add_argument("--lambda-q", type=float)
    p.add_argument("--nm", type=int, help="number of memory units")
    p.add_argument("--lm", type=int, help="memory unit length")
    p.add_argument("--no-bt", action="store_true", help="disable background thresholding")
    p.add_argument("--no-ql", action="store_true", help="disable the query ranking loss")
    p.add_argument("--no-mem", action="store_true", help="disable the memory pool (implies --no-ql)")
    p.add_argument("--log-timing", action="store_true", help="add wall_ms to log records")
    p.add_argument("--test-mode", action="store_true", help="check training invariants every epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdcdet", description="Memory-augmented continual detection on toy streams.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic task stream")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="flat JSON object of StreamSpec fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--tasks", type=int, help="number of tasks")
    g.add_argument("--recurrence-rate", type=float)
    g.add_argument("--train-per-task", type=int)
    g.add_argument("--eval-per-task", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train over a stream, one checkpoint per task")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on the eval images of tasks 1..t")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--stream", required=True)
    e.add_argument("--task", type=int, help="defaults to the checkpoint's last trained task")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train one configuration per value of an ablation axis")
    _add_train_flags(a)
    a.add_argument("--axis", required=True, choices=AXES)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        parser.error(str(err))  # exits 2
    except InvariantViolation as err:
        print(f"mdcdet: invariant violation: {err}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, StreamFormatError, CompatibilityError, PlacementError) as err:
        print(f"mdcdet: {err}", file=sys.stderr)
        return EXIT_INPUT
    except MDCDetError as err:
        print(f"mdcdet: {err}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
