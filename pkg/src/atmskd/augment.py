"""Batch-level Mixup / CutMix and the policy that picks between them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

NONE, MIXUP, CUTMIX = "none", "mixup", "cutmix"


@dataclass
class AugmentConfig:
    p_trigger: float = 0.5
    alpha_mixup: float = 0.2
    alpha_cutmix: float = 1.0


@dataclass
class MixedBatch:
    """Augmented images plus what the mixed loss needs.

    The training target of row ``n`` is
    ``lam * targets_a[n] + (1 - lam) * targets_b[n]``.
    """

    images: np.ndarray
    targets_a: np.ndarray
    targets_b: np.ndarray
    lam: float = 1.0
    method: str = NONE

    @property
    def mixed_targets(self) -> np.ndarray:
        return self.lam * self.targets_a + (1.0 - self.lam) * self.targets_b


def unmixed(images: np.ndarray, targets: np.ndarray) -> MixedBatch:
    return MixedBatch(images, targets, targets, 1.0, NONE)


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """Draw from Beta(alpha, alpha) as a ratio of two Gamma draws."""
    if not alpha > 0:
        raise ParameterError(f"Beta alpha must be > 0, got {alpha}")
    while True:
        a = rng.gamma(alpha)
        b = rng.gamma(alpha)
        if a + b > 0:
            lam = a / (a + b)
            if 0.0 < lam < 1.0:
                return float(lam)


def mixup(
    images: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
) -> MixedBatch:
    """Convex combination of each sample with a randomly permuted partner."""
    n = images.shape[0]
    if n < 2:
        return unmixed(images, targets)
    if lam is None:
        lam = sample_beta(alpha, rng)
    perm = rng.permutation(n)
    mixed = lam * images + (1.0 - lam) * images[perm]
    return MixedBatch(mixed, targets, targets[perm], float(lam), MIXUP)


def cutmix_box(h: int, w: int, lam0: float, cy: int, cx: int) -> tuple[int, int, int, int]:
    """Clipped patch (y1, y2, x1, x2) whose unclipped area fraction is 1 - lam0."""
    ratio = math.sqrt(1.0 - lam0)
    cut_h, cut_w = int(h * ratio), int(w * ratio)
    y1, y2 = np.clip([cy - cut_h // 2, cy + cut_h // 2], 0, h)
    x1, x2 = np.clip([cx - cut_w // 2, cx + cut_w // 2], 0, w)
    return int(y1), int(y2), int(x1), int(x2)


def cutmix(
    images: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam0: float | None = None,
    center: tuple[int, int] | None = None,
) -> MixedBatch:
    """Paste a rectangle from a permuted partner; lam is the kept-area fraction."""
    n, _, h, w = images.shape
    if n < 2 or h < 2 or w < 2:
        return unmixed(images, targets)
    if lam0 is None:
        lam0 = sample_beta(alpha, rng)
    perm = rng.permutation(n)
    if center is None:
        center = (int(rng.integers(h)), int(rng.integers(w)))
    y1, y2, x1, x2 = cutmix_box(h, w, lam0, *center)
    area = (y2 - y1) * (x2 - x1)
    if area == 0:
        return unmixed(images, targets)
    mixed = images.copy()
    mixed[:, :, y1:y2, x1:x2] = images[perm][:, :, y1:y2, x1:x2]
    lam = 1.0 - area / (h * w)
    return MixedBatch(mixed, targets, targets[perm], lam, CUTMIX)


def apply_policy(images: np.ndarray, targets: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> MixedBatch:
    """Fire with probability ``p_trigger``; if fired, Mixup or CutMix with equal odds."""
    if not 0.0 <= cfg.p_trigger <= 1.0:
        raise ParameterError(f"p_trigger must be in [0, 1], got {cfg.p_trigger}")
    fire = rng.random() < cfg.p_trigger
    if not fire:
        return unmixed(images, targets)
    if rng.random() < 0.5:
        return mixup(images, targets, cfg.alpha_mixup, rng)
    return cutmix(images, targets, cfg.alpha_cutmix, rng)
