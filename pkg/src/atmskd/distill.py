"""Adaptive temperature scheduling, the distillation loss and the temperature sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import functional as F
from .augment import MixedBatch
from .errors import ConfigurationError, ParameterError, UsageError
from .tensor import Tensor, no_grad, parameter, sum_squares

# Capacity-aware starting temperatures per width multiplier.
INITIAL_TEMPERATURE = {0.75: 6.0, 1.0: 4.5, 1.25: 4.3}
T_MIN = 3.0
KAPPA = 0.5


@dataclass
class TemperatureState:
    t_init: float
    t_min: float
    total_epochs: int
    kappa: float = KAPPA
    current: float = 0.0
    epoch: int = 0
    gap: float = 0.0
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.t_min <= self.t_init:
            raise ConfigurationError(f"need 0 < t_min <= t_init, got t_min={self.t_min}, t_init={self.t_init}")
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not self.current:
            self.current = self.t_init


def init_temperature(
    width_multiplier: float,
    total_epochs: int,
    t_init: float | None = None,
    t_min: float = T_MIN,
    kappa: float = KAPPA,
) -> TemperatureState:
    """Starting state; ``t_init`` overrides the per-width table."""
    if t_init is None:
        key = min(INITIAL_TEMPERATURE, key=lambda w: abs(w - width_multiplier))
        if abs(key - width_multiplier) > 1e-9:
            raise ConfigurationError(
                f"no default starting temperature for width {width_multiplier}; set kd.t_init explicitly"
            )
        t_init = INITIAL_TEMPERATURE[key]
    return TemperatureState(t_init=float(t_init), t_min=float(t_min), total_epochs=int(total_epochs), kappa=kappa)


def scheduled_temperature(t_init: float, t_min: float, total_epochs: int, kappa: float, epoch: int, gap: float) -> float:
    """Cosine decay from t_init to t_min, boosted by the accuracy gap, then clamped."""
    base = t_min + (t_init - t_min) * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0
    modulated = base * (1.0 + kappa * max(0.0, gap) / 100.0)
    return min(max(modulated, t_min), t_init)


def step_temperature(state: TemperatureState, epoch: int, gap: float) -> float:
    """Advance ``state`` to ``epoch`` given the latest teacher-student gap (points)."""
    if not 0 <= epoch < state.total_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {state.total_epochs})")
    state.epoch = epoch
    state.gap = float(gap)
    state.current = scheduled_temperature(state.t_init, state.t_min, state.total_epochs, state.kappa, epoch, gap)
    state.history.append(state.current)
    return state.current


@dataclass
class KDLossConfig:
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 1e-5

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError(f"loss weights must be non-negative: {self}")
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ConfigurationError(f"alpha + beta must equal 1, got {self.alpha} + {self.beta}")


def mixed_cross_entropy(logits: Tensor, batch: MixedBatch, label_smoothing: float = 0.0) -> Tensor:
    """lam * CE(y_a) + (1 - lam) * CE(y_b)."""
    ce_a = F.cross_entropy(logits, batch.targets_a, label_smoothing)
    ce_b = F.cross_entropy(logits, batch.targets_b, label_smoothing)
    return ce_a * batch.lam + ce_b * (1.0 - batch.lam)


def kd_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | np.ndarray | None,
    batch: MixedBatch,
    tau: float,
    cfg: KDLossConfig,
    params: Sequence[Tensor] = (),
) -> Tensor:
    """alpha * tau^2 * KL(teacher || student) + beta * mixed CE + gamma * sum ||p||^2.

    The teacher side never receives gradient. With ``teacher_logits=None`` the
    soft term is dropped entirely, which requires ``alpha == 0``.
    """
    cfg.validate()
    if teacher_logits is None:
        if cfg.alpha != 0:
            raise ConfigurationError("teacher logits are required when alpha > 0")
        total = mixed_cross_entropy(student_logits, batch) * cfg.beta
    else:
        zt = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
        p_teacher = F.softmax_np(zt, tau)
        log_p_student = F.log_softmax_temp(student_logits, tau)
        soft = F.kl_div(log_p_student, p_teacher) * (tau * tau)
        total = soft * cfg.alpha + mixed_cross_entropy(student_logits, batch) * cfg.beta
    if params and cfg.gamma:
        total = total + sum_squares(list(params)) * cfg.gamma
    return total


# -- temperature sensitivity sweep -------------------------------------------

def parse_grid(text: str) -> list[float]:
    """``"min:max:step"`` -> inclusive list of temperatures."""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise ParameterError(f"grid must look like min:max:step, got {text!r}") from exc
    if step <= 0 or hi < lo or lo <= 0:
        raise ParameterError(f"grid needs 0 < min <= max and step > 0, got {text!r}")
    n = int(round((hi - lo) / step)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def mean_entropy(logits: np.ndarray, tau: float) -> float:
    p = F.softmax_np(logits, tau)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-plogp.sum(axis=1).mean())


def _probe_head(features: np.ndarray, labels: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                probe_feats: np.ndarray, probe_labels: np.ndarray, tau: float, seed: int) -> float:
    """Fine-tune a copy of the linear head for one epoch at ``tau``; return accuracy."""
    w = parameter(weight.copy())
    b = parameter(bias.copy())
    rng = np.random.default_rng(seed)
    onehot = np.eye(weight.shape[1])[probe_labels]
    order = rng.permutation(len(probe_labels))
    lr = 0.05
    for start in range(0, len(order), 32):
        idx = order[start : start + 32]
        logits = F.linear(Tensor(probe_feats[idx]), w, b) * (1.0 / tau)
        loss = F.cross_entropy(logits, onehot[idx])
        w.grad = b.grad = None
        loss.backward()
        w.data -= lr * w.grad
        b.data -= lr * b.grad
    pred = (features @ w.data + b.data).argmax(axis=1)
    return float((pred == labels).mean())


def temperature_sensitivity(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    tau_grid: Sequence[float],
    probe: str = "plain",
    probe_data: tuple[np.ndarray, np.ndarray] | None = None,
    batch_size: int = 64,
) -> tuple[float, list[dict]]:
    """Sweep temperatures and pick the one maximizing entropy x accuracy.

    Args:
        model: network with ``features`` and ``head``; evaluated in eval mode.
        images: validation images (N, C, H, W).
        labels: integer class labels (N,).
        tau_grid: candidate temperatures, all > 0.
        probe: ``"plain"`` scores accuracy of the frozen model (the same for
            every temperature); ``"calibration"`` first retrains a copy of the
            classifier head for one epoch at each temperature.
        probe_data: (images, labels) used to retrain the head; defaults to the
            validation data.

    Returns:
        (best temperature, table rows with keys tau, entropy, accuracy, score).
        Ties resolve to the first grid entry.
    """
    grid = [float(t) for t in tau_grid]
    if not grid:
        raise ParameterError("temperature grid is empty")
    if any(t <= 0 for t in grid):
        raise ParameterError(f"temperatures must be > 0, got {grid}")
    if len(images) == 0:
        raise ParameterError("validation set is empty")
    if probe not in ("plain", "calibration"):
        raise ParameterError(f"unknown probe {probe!r}")

    feats = _features(model, images, batch_size)
    logits = feats @ model.head.weight.data + model.head.bias.data
    if probe == "calibration":
        p_images, p_labels = probe_data if probe_data is not None else (images, labels)
        p_feats = feats if probe_data is None else _features(model, p_images, batch_size)
    plain_acc = float((logits.argmax(axis=1) == labels).mean())

    rows = []
    best_tau, best_score = grid[0], -math.inf
    for tau in grid:
        entropy = mean_entropy(logits, tau)
        if probe == "plain":
            acc = plain_acc
        else:
            acc = _probe_head(feats, labels, model.head.weight.data, model.head.bias.data,
                              p_feats, np.asarray(p_labels), tau, seed=0)
        score = entropy * acc
        rows.append({"tau": tau, "entropy": entropy, "accuracy": acc, "score": score})
        if score > best_score:
            best_tau, best_score = tau, score
    return best_tau, rows


def _features(model, images: np.ndarray, batch_size: int) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model.features(Tensor(images[start : start + batch_size])).data)
    return np.concatenate(out, axis=0)
