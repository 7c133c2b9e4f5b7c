"""Single-sample CPU inference timing."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class TimingStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float
    throughput: float  # samples / s, = 1 / mean latency
    n_runs: int
    batch_size: int
    thread_mode: str
    batch_throughput: float | None = None


def thread_mode() -> str:
    try:
        from threadpoolctl import threadpool_info

        n = max((info.get("num_threads", 1) for info in threadpool_info()), default=1)
    except ImportError:  # pragma: no cover
        n = int(os.environ.get("ATMSKD_THREADS", "1"))
    return "single" if n == 1 else f"multi({n})"


def timing_stats(samples_s, batch_size: int = 1) -> TimingStats:
    t = np.asarray(samples_s, dtype=np.float64)
    mean = float(t.mean())
    return TimingStats(
        mean_ms=mean * 1e3,
        median_ms=float(np.median(t)) * 1e3,
        p95_ms=float(np.percentile(t, 95)) * 1e3,
        min_ms=float(t.min()) * 1e3,
        max_ms=float(t.max()) * 1e3,
        throughput=1.0 / mean,
        n_runs=len(t),
        batch_size=batch_size,
        thread_mode=thread_mode(),
    )


def benchmark_inference(
    model,
    input_shape: tuple[int, ...] = (1, 3, 64, 64),
    n_warmup: int = 10,
    n_runs: int = 30,
    seed: int = 0,
    batch_throughput_size: int | None = None,
) -> TimingStats:
    """Time eval-mode forward passes after ``n_warmup`` untimed ones."""
    model.eval()
    x = Tensor(np.random.default_rng(seed).standard_normal(input_shape))
    samples = []
    with no_grad():
        for _ in range(n_warmup):
            model(x)
        for _ in range(n_runs):
            t0 = time.perf_counter()
            model(x)
            samples.append(time.perf_counter() - t0)
        stats = timing_stats(samples, input_shape[0])
        if batch_throughput_size:
            xb = Tensor(np.random.default_rng(seed).standard_normal((batch_throughput_size, *input_shape[1:])))
            t0 = time.perf_counter()
            model(xb)
            stats.batch_throughput = batch_throughput_size / (time.perf_counter() - t0)
    return stats


CV_FLAG = 0.15


def repeat_variation(model, input_shape=(1, 3, 64, 64), repeats: int = 3, **kwargs) -> tuple[float, bool]:
    """Coefficient of variation of mean latency over ``repeats`` benchmark calls.

    Returns ``(cv, flagged)``; ``flagged`` is True above 15%, which usually means a
    busy machine rather than a broken harness, so callers warn instead of failing.
    """
    if repeats < 2:
        raise ValueError(f"repeats must be >= 2, got {repeats}")
    means = np.array([benchmark_inference(model, input_shape, **kwargs).mean_ms for _ in range(repeats)])
    cv = float(means.std(ddof=1) / means.mean())
    return cv, cv > CV_FLAG
