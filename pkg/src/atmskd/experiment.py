"""Desk-scale comparison: one teacher, then ATMS-KD vs direct vs fixed-temperature students per seed.

Run as ``python -m atmskd.experiment --out runs/desk`` to write ``summary.json`` plus
one run directory per arm.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import RunConfig
from .data import generate_synthetic, split
from .metrics import knowledge_retention
from .train import (
    Splits,
    direct_train_student,
    distill_student,
    evaluate_split,
    fixed_temp_distill,
    save_run,
    train_teacher,
)

log = logging.getLogger(__name__)

ARMS = ("atms", "direct", "fixed")


def desk_experiment(
    out_dir: str | Path | None = None,
    seeds: tuple[int, ...] = (42, 43, 44),
    width: float = 0.75,
    cfg: RunConfig | None = None,
) -> dict:
    """Train the teacher once, then the three student arms for every seed.

    Returns a JSON-ready summary with best validation accuracy per arm and seed,
    test accuracy, and knowledge retention of each ATMS-KD student on the test split.
    """
    cfg = cfg or RunConfig.for_profile("desk")
    d = cfg.data
    data = generate_synthetic(d.n_per_class, d.image_size, d.seed)
    splits = Splits(*split(data, cfg.split_spec()))
    out = Path(out_dir) if out_dir is not None else None

    t0 = time.perf_counter()
    teacher, t_rep = train_teacher(splits, cfg.teacher_train())
    _, teacher_test = evaluate_split(teacher, splits.test)
    if out is not None:
        save_run(out / "teacher", teacher, t_rep)
    summary = {
        "width": width,
        "seeds": list(seeds),
        "teacher": {"best_val_acc": t_rep.best_val_acc, "best_epoch": t_rep.best_epoch, "test_acc": teacher_test},
        "students": {},
    }
    kd, aug = cfg.kd_loss(), cfg.augment_config()
    for seed in seeds:
        tc = cfg.student_train()
        tc.seed = seed
        runs = {
            "atms": lambda: distill_student(teacher, width, splits, tc, kd, aug, t_min=cfg.kd.t_min, kappa=cfg.kd.kappa),
            "direct": lambda: direct_train_student(width, splits, tc, kd, aug),
            "fixed": lambda: fixed_temp_distill(teacher, width, splits, tc, kd, tau_fixed=cfg.kd.tau_fixed),
        }
        row = {}
        for arm in ARMS:
            net, rep = runs[arm]()
            _, test_acc = evaluate_split(net, splits.test)
            row[arm] = {"best_val_acc": rep.best_val_acc, "best_epoch": rep.best_epoch, "test_acc": test_acc,
                        "final_tau": rep.epochs[-1].tau}
            if out is not None:
                save_run(out / f"{arm}-seed{seed}", net, rep)
            log.info("seed %d %s: val %.2f test %.2f", seed, arm, rep.best_val_acc, test_acc)
        row["atms"]["kr"] = knowledge_retention(row["atms"]["test_acc"], teacher_test)
        summary["students"][str(seed)] = row
    summary["seconds"] = time.perf_counter() - t0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def verdict(summary: dict, kr_floor: float = 95.0, teacher_floor: float = 95.0) -> dict[str, bool]:
    """Pass/fail of each comparison in ``summary``; ties count in the student's favour."""
    rows = summary["students"].values()
    wins_direct = sum(r["atms"]["best_val_acc"] >= r["direct"]["best_val_acc"] for r in rows)
    wins_fixed = sum(r["atms"]["best_val_acc"] >= r["fixed"]["best_val_acc"] for r in rows)
    need = len(summary["seeds"]) * 2 // 3 + (1 if len(summary["seeds"]) * 2 % 3 else 0)
    return {
        "teacher": summary["teacher"]["best_val_acc"] >= teacher_floor,
        "vs_direct": wins_direct >= need,
        "vs_fixed": wins_fixed >= need,
        "kr": all(r["atms"]["kr"] >= kr_floor for r in rows),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m atmskd.experiment", description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", type=int, nargs="+", default=[42, 43, 44])
    p.add_argument("--width", type=float, default=0.75)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    with threadpool_limits(1):
        summary = desk_experiment(args.out, tuple(args.seeds), args.width)
    print(json.dumps(verdict(summary)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
