"""Small Monte Carlo summary helpers."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .rng import RNGStream


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def estimate(samples) -> Estimate:
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("estimate: empty sample")
    mean = float(np.mean(x))
    stderr = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Estimate(mean, stderr, n)


def variance_estimate(samples) -> Estimate:
    """Unbiased sample variance with a delta-method standard error."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    c = x - x.mean()
    m2 = float(np.mean(c**2))
    m4 = float(np.mean(c**4))
    var = m2 * n / (n - 1)
    return Estimate(var, math.sqrt(max(m4 - m2 * m2, 0.0) / n), n)


def combined_stderr(*errs: float) -> float:
    return math.sqrt(sum(e * e for e in errs))


def within(diff: float, stderr: float, k: float = 3.0, extra: float = 0.0) -> bool:
    return abs(diff) <= k * stderr + extra


def chunk_sizes(n: int, chunk: int) -> list[int]:
    sizes = [chunk] * (n // chunk)
    if n % chunk:
        sizes.append(n % chunk)
    return sizes


def map_chunks(
    fn: Callable[[RNGStream, int], np.ndarray],
    n: int,
    stream: RNGStream,
    chunk: int = 10_000,
    workers: int = 1,
) -> np.ndarray:
    """Evaluate ``fn(child_stream, size)`` over fixed-size chunks and concatenate.

    Chunk ``j`` always uses ``stream.child(j)``; the concatenation order is the
    chunk order, so the output is identical for every worker count.
    """
    sizes = chunk_sizes(n, chunk)
    jobs = [(stream.child(j), size) for j, size in enumerate(sizes)]
    if workers <= 1 or len(jobs) == 1:
        parts: Sequence[np.ndarray] = [fn(s, m) for s, m in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: fn(*job), jobs))
    return np.concatenate([np.asarray(p) for p in parts], axis=0)
