"""``atmskd`` command-line entry point.

Exit codes: 0 success, 1 I/O, 2 usage/validation, 3 numeric divergence,
4 model mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config, write_resolved
from .data import Dataset, MIN_SYNTHETIC_SIZE, export_folder, generate_synthetic, load_folder, split
from .errors import (
    AtmsError,
    CheckpointError,
    ConfigurationError,
    ModelMismatchError,
    NumericalError,
    ParameterError,
    UsageError,
    ValidationError,
)

log = logging.getLogger("atmskd")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
SYNTHETIC = "synthetic"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ModelMismatchError):
        return EXIT_MISMATCH
    if isinstance(exc, NumericalError):
        return EXIT_DIVERGED
    if isinstance(exc, (OSError, CheckpointError)):
        return EXIT_IO
    if isinstance(exc, (UsageError, ValidationError, ParameterError, ConfigurationError, AtmsError)):
        return EXIT_USAGE
    raise exc


# -- shared helpers ------------------------------------------------------------------

def _config(args, **overrides) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "profile", None), overrides)


def _load_data(source: str, cfg: RunConfig) -> Dataset:
    if source == SYNTHETIC:
        d = cfg.data
        return generate_synthetic(d.n_per_class, d.image_size, d.seed)
    return load_folder(source, cfg.data.image_size)


def _splits(args, cfg: RunConfig):
    from .train import Splits

    ds = _load_data(args.data, cfg)
    if ds.skipped:
        log.warning("%d undecodable images skipped", ds.skipped)
    return Splits(*split(ds, cfg.split_spec()))


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _finish_run(args, cfg: RunConfig, net, report, splits) -> None:
    from .metrics import build_eval_report, confusion, model_size_mb
    from .models import count_parameters
    from .train import save_run

    out = Path(args.out)
    ckpt = save_run(out, net, report)
    cm = confusion(net, splits.test)
    ev = build_eval_report(cm, 1, splits.test.class_names, report.teacher_val_acc)
    ev.params = count_parameters(net)
    ev.model_size_mb = model_size_mb(ckpt)
    payload = {"train": report.to_dict(), "test": asdict(ev), "checkpoint": ckpt.name}
    _write_json(out / "report.json", payload)
    write_resolved(cfg, out)
    print(
        f"{report.mode}: best val acc {report.best_val_acc:.2f}% (epoch {report.best_epoch}), "
        f"test acc {ev.accuracy:.2f}% -> {out}"
    )


def _check_width(width: float) -> float:
    if not width > 0:
        raise ValidationError(f"--width must be > 0, got {width}")
    return width


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args, data={"n_per_class": args.n_per_class, "image_size": args.size, "seed": args.seed})
    if cfg.data.image_size < MIN_SYNTHETIC_SIZE:
        raise ValidationError(f"--size must be >= {MIN_SYNTHETIC_SIZE}, got {cfg.data.image_size}")
    ds = generate_synthetic(cfg.data.n_per_class, cfg.data.image_size, cfg.data.seed)
    written = export_folder(ds, args.out)
    print(f"wrote {len(written)} images to {args.out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .train import train_teacher

    cfg = _config(args, train={"teacher_epochs": args.epochs, "seed": args.seed})
    splits = _splits(args, cfg)
    net, report = train_teacher(splits, cfg.teacher_train())
    _finish_run(args, cfg, net, report, splits)
    return EXIT_OK


def _student_cfg(args) -> RunConfig:
    return _config(
        args,
        model={"width": args.width},
        train={"student_epochs": args.epochs, "seed": args.seed},
        kd={"tau_fixed": getattr(args, "tau", None), "t_init": getattr(args, "t_init", None)},
    )


def _teacher(args):
    from .checkpoint import load_checkpoint

    return load_checkpoint(args.teacher)


def cmd_distill(args) -> int:
    from .distill import init_temperature
    from .train import distill_student

    cfg = _student_cfg(args)
    width = _check_width(cfg.model.width)
    init_temperature(width, cfg.train.student_epochs, t_init=cfg.kd.t_init, t_min=cfg.kd.t_min)
    teacher = _teacher(args)
    splits = _splits(args, cfg)
    net, report = distill_student(
        teacher, width, splits, cfg.student_train(), cfg.kd_loss(), cfg.augment_config(),
        t_init=cfg.kd.t_init, t_min=cfg.kd.t_min, kappa=cfg.kd.kappa,
    )
    _finish_run(args, cfg, net, report, splits)
    return EXIT_OK


def cmd_train_direct(args) -> int:
    from .train import direct_train_student

    cfg = _student_cfg(args)
    width = _check_width(cfg.model.width)
    splits = _splits(args, cfg)
    net, report = direct_train_student(width, splits, cfg.student_train(), cfg.kd_loss(), cfg.augment_config())
    _finish_run(args, cfg, net, report, splits)
    return EXIT_OK


def cmd_distill_fixed(args) -> int:
    from .train import fixed_temp_distill

    cfg = _student_cfg(args)
    width = _check_width(cfg.model.width)
    if not cfg.kd.tau_fixed > 0:
        raise ValidationError(f"--tau must be > 0, got {cfg.kd.tau_fixed}")
    teacher = _teacher(args)
    splits = _splits(args, cfg)
    net, report = fixed_temp_distill(teacher, width, splits, cfg.student_train(), cfg.kd_loss(), tau_fixed=cfg.kd.tau_fixed)
    _finish_run(args, cfg, net, report, splits)
    return EXIT_OK


def _eval_split(args, cfg: RunConfig, num_classes: int) -> Dataset:
    ds = _load_data(args.data, cfg)
    if ds.num_classes != num_classes:
        raise ModelMismatchError(f"checkpoint predicts {num_classes} classes, data has {ds.num_classes}")
    if args.split == "all":
        return ds
    train, val, test = split(ds, cfg.split_spec())
    return {"train": train, "val": val, "test": test}[args.split]


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import build_eval_report, confusion, emit_report, model_size_mb
    from .models import count_parameters

    cfg = _config(args)
    net = load_checkpoint(args.checkpoint)
    ds = _eval_split(args, cfg, net.spec.num_classes)
    report = build_eval_report(confusion(net, ds), args.positive_class, ds.class_names, args.teacher_acc)
    report.params = count_parameters(net)
    report.model_size_mb = model_size_mb(args.checkpoint)
    if args.out:
        emit_report(report, args.out, args.format)
    print(json.dumps(asdict(report), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import benchmark_inference
    from .checkpoint import load_checkpoint

    cfg = _config(args)
    if args.runs < 1:
        raise ValidationError(f"--runs must be >= 1, got {args.runs}")
    net = load_checkpoint(args.checkpoint)
    size = args.size or net.spec.input_size
    stats = benchmark_inference(
        net, (1, 3, size, size), n_warmup=cfg.bench.n_warmup if args.warmup is None else args.warmup,
        n_runs=args.runs, batch_throughput_size=cfg.bench.batch_throughput_size,
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("bench.json")
    _write_json(out, asdict(stats))
    print(json.dumps(asdict(stats), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze_temperature(args) -> int:
    from .checkpoint import load_checkpoint
    from .distill import parse_grid, temperature_sensitivity

    cfg = _config(args)
    grid = parse_grid(args.grid)
    net = load_checkpoint(args.checkpoint)
    ds = _load_data(args.data, cfg)
    if ds.num_classes != net.spec.num_classes:
        raise ModelMismatchError(f"checkpoint predicts {net.spec.num_classes} classes, data has {ds.num_classes}")
    train, val, _ = split(ds, cfg.split_spec())
    probe_data = (train.images, train.labels) if args.probe == "calibration" else None
    tau_star, rows = temperature_sensitivity(net, val.images, val.labels, grid, args.probe, probe_data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tau", "entropy", "accuracy", "score", "best"))
        for r in rows:
            w.writerow([repr(r["tau"]), repr(r["entropy"]), repr(r["accuracy"]), repr(r["score"]),
                        int(r["tau"] == tau_star)])
    print(f"tau* = {tau_star:g} ({len(rows)} grid points) -> {out}")
    return EXIT_OK


COMPARE_FIELDS = (
    "run", "mode", "width", "seed", "best_val_acc", "accuracy", "precision", "recall", "f1", "kr",
    "avg_inference_ms", "params", "model_size_mb",
)


def cmd_compare(args) -> int:
    rows = []
    for run in args.runs:
        run = Path(run)
        report_path = run / "report.json" if run.is_dir() else run
        try:
            payload = json.loads(report_path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{report_path}: invalid JSON: {exc}") from exc
        train, test = payload["train"], payload["test"]
        bench_path = report_path.with_name("bench.json")
        latency = json.loads(bench_path.read_text())["mean_ms"] if bench_path.exists() else None
        rows.append({
            "run": str(report_path.parent),
            "mode": train["mode"],
            "width": train["width"],
            "seed": train["seed"],
            "best_val_acc": train["best_val_acc"],
            "accuracy": test["accuracy"],
            "precision": test["precision"],
            "recall": test["recall"],
            "f1": test["f1"],
            "kr": test["kr"],
            "avg_inference_ms": latency,
            "params": test["params"],
            "model_size_mb": test["model_size_mb"],
        })
    rows.sort(key=lambda r: (-r["accuracy"], r["run"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else v for k, v in r.items()})
    print(f"{len(rows)} runs -> {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI or JSON run config")
    p.add_argument("--profile", choices=("desk", "paper"), help="default set (desk unless the config says otherwise)")


def _training(p: argparse.ArgumentParser, teacher: bool) -> None:
    _common(p)
    p.add_argument("--data", required=True, help=f"image folder, or '{SYNTHETIC}' to generate in memory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, help="override the profile's epoch budget")
    p.add_argument("--seed", type=int, help="training seed")
    if not teacher:
        p.add_argument("--width", type=float, help="student width multiplier (0.75, 1.0, 1.25)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atmskd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic image folder")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the wide teacher")
    _training(p, teacher=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="ATMS-KD student training")
    _training(p, teacher=False)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--t-init", type=float, help="initial temperature (required for non-standard widths)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train-direct", help="student on hard labels only")
    _training(p, teacher=False)
    p.set_defaults(func=cmd_train_direct)

    p = sub.add_parser("distill-fixed", help="classic KD at a constant temperature")
    _training(p, teacher=False)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--tau", type=float, help="fixed temperature (default 4)")
    p.set_defaults(func=cmd_distill_fixed)

    p = sub.add_parser("evaluate", help="classification metrics for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--teacher-acc", type=float, help="teacher accuracy %% for knowledge retention")
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--out", help="report path (.json or .csv)")
    p.add_argument("--format", choices=("json", "csv"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="single-sample CPU latency")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmup", type=int)
    p.add_argument("--size", type=int, help="input side length (default: the model's)")
    p.add_argument("--out", help="JSON path (default: bench.json next to the checkpoint)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze-temperature", help="entropy x accuracy temperature sweep")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="1:8:0.5", help="min:max:step, inclusive")
    p.add_argument("--probe", choices=("plain", "calibration"), default="plain")
    p.add_argument("--out", default="temperature.csv")
    p.set_defaults(func=cmd_analyze_temperature)

    p = sub.add_parser("compare", help="join run reports into one table")
    p.add_argument("runs", nargs="+", help="run directories or report.json files")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_compare)
    return parser


def _thread_limit() -> int:
    raw = os.environ.get("ATMSKD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"ATMSKD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"ATMSKD_THREADS must be >= 1, got {n}")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # mapped to the exit-code contract; anything else propagates
        code = exit_code_for(exc)
        print(f"atmskd {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
