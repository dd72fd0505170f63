"""Independent reference computations whose outputs are frozen into the tests.

Run ``python tests/oracles.py`` to regenerate. These use only the standard
library ``random`` module and plain loops, sharing no code with the package.
"""
from __future__ import annotations

import math
import random


def gem_length(rng: random.Random, tol: float, require_tail_below_min: bool) -> int:
    rem, smallest, n = 1.0, math.inf, 0
    while True:
        y = 1.0 - rng.random()
        w = y * rem
        rem *= 1.0 - y
        smallest = min(smallest, w)
        n += 1
        if rem < tol and (not require_tail_below_min or rem <= smallest):
            return n


def largest_exceeds_half(rng: random.Random, tol: float = 1e-12) -> bool:
    rem, big = 1.0, 0.0
    while rem >= tol and big <= rem:
        y = rng.random()
        big = max(big, y * rem)
        rem *= 1.0 - y
    return big > 0.5


def mean_and_se(xs):
    n = len(xs)
    m = sum(xs) / n
    v = sum((x - m) ** 2 for x in xs) / (n - 1)
    return m, math.sqrt(v / n)


if __name__ == "__main__":
    rng = random.Random(12345)
    n = 400_000
    print("gem length, tol 1e-8, package rule:", mean_and_se([gem_length(rng, 1e-8, True) for _ in range(n)]))
    print("gem length, tol 1e-8, hitting time:", mean_and_se([gem_length(rng, 1e-8, False) for _ in range(n)]))
    print("P(largest > 1/2):", mean_and_se([float(largest_exceeds_half(rng)) for _ in range(n)]))
