"""Timing harness for the scan and for incremental inference."""

import time
from dataclasses import dataclass, field

import numpy as np

from .lru import PassCounter, init_lru, lru_forward_parallel
from .model import init_model, init_session, model_step

WARMUP = 2


@dataclass
class BenchRecord:
    scenario: str
    N: int
    L: int
    H: int
    reps: int
    median: float
    p90: float
    passes: int | None = None
    cumulative: list = field(default_factory=list, repr=False)

    HEADER = ("scenario", "N", "L", "H", "reps", "median_s", "p90_s", "passes")

    def row(self):
        return (self.scenario, self.N, self.L, self.H, self.reps, f"{self.median:.9f}",
                f"{self.p90:.9f}", "" if self.passes is None else self.passes)


def _stats(samples):
    samples = np.asarray(samples)
    return float(np.median(samples)), float(np.percentile(samples, 90))


def bench_scan(lengths=(2, 8, 32, 128, 512), H=64, N=8, reps=5, rng=None):
    """Median forward time and exact pass count of the parallel scan per length."""
    if reps < 5:
        raise ValueError("reps must be >= 5")
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("length grid must be increasing")
    rng = np.random.default_rng(rng)
    p = init_lru(H, 2 * H, rng=rng)
    records = []
    for L in lengths:
        if L < 1 or L & (L - 1):
            raise ValueError(f"length {L} is not a power of two")
        x = rng.standard_normal((N, L, H))
        mask = np.ones((N, L), dtype=bool)
        counter = PassCounter()
        lru_forward_parallel(x, mask, p, counter=counter)
        passes = counter.passes
        times = []
        for i in range(WARMUP + reps):
            t0 = time.perf_counter()
            lru_forward_parallel(x, mask, p)
            if i >= WARMUP:
                times.append(time.perf_counter() - t0)
        records.append(BenchRecord("scan", N, L, H, reps, *_stats(times), passes=passes))
    return records


def bench_incremental(histories=(10, 100, 1000), steps=256, H=64, item_count=1000, batch=1,
                      rng=None):
    """Per-step latency of :func:`model_step` after warming a session.

    Each history length first feeds that many random items into a fresh
    session, then times ``steps`` further steps individually.
    """
    if steps == 0:
        return []
    if steps < 5:
        raise ValueError("steps must be 0 or >= 5")
    histories = list(histories)
    if histories != sorted(histories):
        raise ValueError("history grid must be increasing")
    rng = np.random.default_rng(rng)
    params = init_model(item_count, H, dropout=0.0, rng=rng)
    records = []
    for hist in histories:
        state = init_session(params, (batch,))
        for item in rng.integers(1, item_count + 1, size=(hist, batch)):
            _, _, state = model_step(params, state, item)
        feed = rng.integers(1, item_count + 1, size=(WARMUP + steps, batch))
        times = []
        for i, item in enumerate(feed):
            t0 = time.perf_counter()
            _, _, state = model_step(params, state, item)
            if i >= WARMUP:
                times.append(time.perf_counter() - t0)
        rec = BenchRecord("incremental", batch, hist, H, steps, *_stats(times))
        rec.cumulative = list(np.cumsum(times))
        records.append(rec)
    return records


def linear_r2(y):
    """R^2 of the least-squares line through ``(1..n, y)``."""
    y = np.asarray(y, dtype=float)
    x = np.arange(1, len(y) + 1, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum(resid**2) / total) if total > 0 else 1.0
