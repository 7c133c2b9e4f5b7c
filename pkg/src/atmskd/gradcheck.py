"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ParameterError
from .tensor import Tensor, no_grad


def finite_diff_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-6,
    coords: Iterable[Sequence[int]] | None = None,
) -> float:
    """Compare the tape gradient of ``f`` w.r.t. ``x`` to central differences.

    ``f`` is re-evaluated with ``x.data`` perturbed in place, so it must read
    ``x`` afresh on every call and return a scalar tensor.

    Args:
        f: zero-argument closure producing a scalar loss.
        x: tensor with ``requires_grad=True`` that ``f`` depends on.
        h: step size, within [1e-6, 1e-3].
        coords: optional subset of multi-indices to probe; all entries by default.

    Returns:
        max over probed coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ParameterError(f"h must lie in [1e-6, 1e-3], got {h}")
    if not x.requires_grad:
        raise ParameterError("finite_diff_check needs x.requires_grad=True")
    x.grad = None
    loss = f()
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    if coords is None:
        coords = np.ndindex(*x.shape)
    worst = 0.0
    for idx in coords:
        idx = tuple(idx)
        orig = x.data[idx]
        with no_grad():
            x.data[idx] = orig + h
            up = f().item()
            x.data[idx] = orig - h
            down = f().item()
            x.data[idx] = orig
        numeric = (up - down) / (2.0 * h)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    x.grad = None
    return worst


def sample_coords(shape: Sequence[int], count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Up to ``count`` distinct random multi-indices into ``shape``."""
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [tuple(int(i) for i in np.unravel_index(k, shape)) for k in flat]
