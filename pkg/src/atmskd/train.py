"""Teacher training, ATMS distillation, and the two baseline arms.

All four entry points share one epoch loop so that, for identical seeds, the
only differences between arms are the ones each arm is defined by.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import functional as F
from .augment import AugmentConfig, MixedBatch, apply_policy, unmixed
from .checkpoint import save_checkpoint
from .data import Dataset
from .distill import KDLossConfig, init_temperature, kd_loss, step_temperature
from .errors import ConfigurationError, ModelMismatchError, NumericalError
from .metrics import predict
from .models import ModelSpec, Network, build_student, build_teacher, freeze, restore, round_to_float32, snapshot
from .optim import AdamW, WarmRestarts, clip_grad_norm, lr_at
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

TEACHER, DIRECT, DISTILL, FIXED = "teacher", "direct", "distill", "fixed"


class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    seed: int = 42
    T_0: int = 10
    T_mult: int = 2
    eta_min: float | None = None
    grad_clip: float = 5.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def teacher_defaults(cls, **kw) -> "TrainConfig":
        base = dict(epochs=30, batch_size=16, lr=1e-3, weight_decay=1e-4, label_smoothing=0.1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def student_defaults(cls, **kw) -> "TrainConfig":
        base = dict(epochs=80, batch_size=32, lr=2e-3)
        base.update(kw)
        return cls(**base)

    def schedule(self) -> WarmRestarts:
        return WarmRestarts(self.lr, self.T_0, self.T_mult, self.eta_min)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    tau: float | None
    lr: float
    seconds: float
    clipped_steps: int = 0
    gap: float | None = None


@dataclass
class TrainReport:
    mode: str
    width: float
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    teacher_val_acc: float | None = None
    params: int = 0

    @property
    def taus(self) -> list[float | None]:
        return [r.tau for r in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(seed: int) -> dict[str, np.random.Generator | int]:
    init, shuffle, aug, drop = np.random.SeedSequence(seed).spawn(4)
    return {
        "init_seed": int(init.generate_state(1)[0]),
        "shuffle": np.random.default_rng(shuffle),
        "augment": np.random.default_rng(aug),
        "dropout": np.random.default_rng(drop),
    }


def weights_digest(net: Network) -> str:
    h = hashlib.sha256()
    for name, p in net.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for name, st in net.named_states():
        h.update(name.encode())
        h.update(st.mean.tobytes())
        h.update(st.var.tobytes())
    return h.hexdigest()


def evaluate_split(net: Network, ds: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """(mean cross-entropy, accuracy %) in eval mode."""
    logits = predict(net, ds.images, batch_size)
    loss = F.cross_entropy(Tensor(logits), ds.onehot()).item()
    acc = 100.0 * float((logits.argmax(axis=1) == ds.labels).mean())
    return loss, acc


class _TeacherCache:
    """Eval-mode teacher logits for clean (un-augmented) training samples."""

    def __init__(self, teacher: Network, num_samples: int, num_classes: int):
        self.teacher = teacher
        self.logits = np.zeros((num_samples, num_classes))
        self.known = np.zeros(num_samples, dtype=bool)

    def __call__(self, images: np.ndarray, idx: np.ndarray, batch: MixedBatch) -> np.ndarray:
        if batch.method != "none":
            return self._forward(batch.images)
        missing = ~self.known[idx]
        if missing.any():
            self.logits[idx[missing]] = self._forward(images[missing])
            self.known[idx[missing]] = True
        return self.logits[idx]

    def _forward(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.teacher(Tensor(images)).data


def _fit(
    net: Network,
    splits: Splits,
    cfg: TrainConfig,
    mode: str,
    *,
    width: float,
    streams: dict,
    teacher: Network | None = None,
    kd: KDLossConfig | None = None,
    augment: AugmentConfig | None = None,
    temperature=None,
    fixed_tau: float | None = None,
) -> TrainReport:
    train, val = splits.train, splits.val
    params = net.parameters()
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    schedule = cfg.schedule()
    report = TrainReport(mode=mode, width=width, seed=cfg.seed, params=int(sum(p.size for p in params)))

    cache = None
    if teacher is not None:
        teacher.eval()
        _, report.teacher_val_acc = evaluate_split(teacher, val)
        cache = _TeacherCache(teacher, len(train), train.num_classes)

    onehot = train.onehot()
    best = None
    gap = 0.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(schedule, epoch)
        opt.lr = lr
        if temperature is not None:
            tau = step_temperature(temperature, epoch, gap)
        else:
            tau = fixed_tau

        net.train()
        order = streams["shuffle"].permutation(len(train))
        loss_sum, correct, seen, clipped = 0.0, 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, targets = train.images[idx], onehot[idx]
            if augment is not None:
                batch = apply_policy(images, targets, augment, streams["augment"])
            else:
                batch = unmixed(images, targets)
            logits = net(Tensor(batch.images), streams["dropout"])
            if mode == TEACHER:
                loss = F.cross_entropy(logits, batch.targets_a, cfg.label_smoothing)
            else:
                zt = cache(images, idx, batch) if cache is not None else None
                loss = kd_loss(logits, zt, batch, tau if tau is not None else 1.0, kd, params)
            opt.zero_grad()
            try:
                loss.backward()
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: divergence during backward: {exc}") from exc
            if cfg.grad_clip:
                _, was_clipped = clip_grad_norm(params, cfg.grad_clip)
                clipped += was_clipped
            opt.step()

            n = len(idx)
            loss_sum += loss.item() * n
            pred = logits.data.argmax(axis=1)
            dominant = batch.targets_a if batch.lam >= 0.5 else batch.targets_b
            correct += float((pred == dominant.argmax(axis=1)).sum())
            seen += n

        round_to_float32(net)
        val_loss, val_acc = evaluate_split(net, val)
        if report.teacher_val_acc is not None:
            gap = report.teacher_val_acc - val_acc
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=100.0 * correct / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            tau=tau,
            lr=lr,
            seconds=time.perf_counter() - t0,
            clipped_steps=clipped,
            gap=gap if report.teacher_val_acc is not None else None,
        )
        report.epochs.append(record)
        if val_acc > report.best_val_acc or best is None:
            report.best_val_acc = val_acc
            report.best_epoch = epoch
            best = snapshot(net)
        log.info(
            "%s epoch %d/%d loss %.4f acc %.2f | val loss %.4f acc %.2f | tau %s lr %.2e (%.1fs)",
            mode, epoch + 1, cfg.epochs, record.train_loss, record.train_acc, val_loss, val_acc,
            "-" if tau is None else f"{tau:.3f}", lr, record.seconds,
        )
    restore(net, best)
    net.eval()
    return report


def _check_classes(teacher: Network, splits: Splits) -> None:
    if teacher.spec.num_classes != splits.train.num_classes:
        raise ModelMismatchError(
            f"teacher predicts {teacher.spec.num_classes} classes but the data has {splits.train.num_classes}"
        )


def train_teacher(splits: Splits, cfg: TrainConfig, base: ModelSpec | None = None) -> tuple[Network, TrainReport]:
    """Cross-entropy with label smoothing on the wide teacher; best-val weights returned."""
    streams = _streams(cfg.seed)
    size = splits.train.images.shape[-1]
    net = build_teacher(splits.train.num_classes, size, seed=streams["init_seed"], base=base)
    report = _fit(net, splits, cfg, TEACHER, width=net.spec.width_multiplier, streams=streams)
    return net, report


def _student(width: float, splits: Splits, streams: dict, base: ModelSpec | None) -> Network:
    size = splits.train.images.shape[-1]
    return build_student(width, splits.train.num_classes, size, seed=streams["init_seed"], base=base)


def distill_student(
    teacher: Network,
    width: float,
    splits: Splits,
    cfg: TrainConfig,
    kd: KDLossConfig = KDLossConfig(),
    augment: AugmentConfig = AugmentConfig(),
    *,
    t_init: float | None = None,
    t_min: float = 3.0,
    kappa: float = 0.5,
    base: ModelSpec | None = None,
    student: Network | None = None,
) -> tuple[Network, TrainReport]:
    """ATMS-KD: mixed-sample augmentation plus the adaptive temperature schedule."""
    _check_classes(teacher, splits)
    kd.validate()
    freeze(teacher)
    state = init_temperature(width, cfg.epochs, t_init=t_init, t_min=t_min, kappa=kappa)
    streams = _streams(cfg.seed)
    net = student if student is not None else _student(width, splits, streams, base)
    report = _fit(net, splits, cfg, DISTILL, width=width, streams=streams, teacher=teacher, kd=kd,
                  augment=augment, temperature=state)
    return net, report


def direct_train_student(
    width: float,
    splits: Splits,
    cfg: TrainConfig,
    kd: KDLossConfig = KDLossConfig(),
    augment: AugmentConfig | None = AugmentConfig(),
    *,
    base: ModelSpec | None = None,
) -> tuple[Network, TrainReport]:
    """Same loop as distillation with alpha = 0 (so beta = 1): hard labels plus L2, no teacher."""
    hard = KDLossConfig(alpha=0.0, beta=1.0, gamma=kd.gamma)
    streams = _streams(cfg.seed)
    net = _student(width, splits, streams, base)
    report = _fit(net, splits, cfg, DIRECT, width=width, streams=streams, kd=hard, augment=augment)
    return net, report


def fixed_temp_distill(
    teacher: Network,
    width: float,
    splits: Splits,
    cfg: TrainConfig,
    kd: KDLossConfig = KDLossConfig(),
    *,
    tau_fixed: float = 4.0,
    base: ModelSpec | None = None,
) -> tuple[Network, TrainReport]:
    """Classic KD: constant temperature, no mixed-sample augmentation."""
    if not tau_fixed > 0:
        raise ConfigurationError(f"tau_fixed must be > 0, got {tau_fixed}")
    _check_classes(teacher, splits)
    kd.validate()
    freeze(teacher)
    streams = _streams(cfg.seed)
    net = _student(width, splits, streams, base)
    report = _fit(net, splits, cfg, FIXED, width=width, streams=streams, teacher=teacher, kd=kd,
                  augment=None, fixed_tau=float(tau_fixed))
    return net, report


# -- run outputs -------------------------------------------------------------------

EPOCH_CSV_FIELDS = ("epoch", "split", "loss", "acc", "tau", "lr")


def write_epoch_csv(report: TrainReport, path: str | Path) -> Path:
    """Deterministic per-epoch log; wall-clock times go to a separate file."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_CSV_FIELDS)
        for r in report.epochs:
            tau = "" if r.tau is None else repr(r.tau)
            w.writerow([r.epoch, "train", repr(r.train_loss), repr(r.train_acc), tau, repr(r.lr)])
            w.writerow([r.epoch, "val", repr(r.val_loss), repr(r.val_acc), tau, repr(r.lr)])
    with (path.parent / "timings.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "seconds", "clipped_steps"))
        for r in report.epochs:
            w.writerow([r.epoch, f"{r.seconds:.3f}", r.clipped_steps])
    return path


def save_run(out_dir: str | Path, net: Network, report: TrainReport, extra_meta: dict | None = None) -> Path:
    """Write ``model.atms`` and ``epochs.csv`` into ``out_dir``; returns the checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "mode": report.mode,
        "width": report.width,
        "epoch": report.best_epoch,
        "best_val_acc": report.best_val_acc,
        "teacher_val_acc": report.teacher_val_acc,
        "seed": report.seed,
    }
    meta.update(extra_meta or {})
    ckpt = save_checkpoint(net, out / "model.atms", meta)
    write_epoch_csv(report, out / "epochs.csv")
    return ckpt
