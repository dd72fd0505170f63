"""Counter-based random streams keyed by (master_seed, stream_id).

Every Monte Carlo chunk owns one stream, so results do not depend on how
chunks are scheduled over workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class RNGStream:
    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            value = getattr(self, name)
            if not (0 <= int(value) <= _U64):
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "RNGStream":
        """Derived stream; children of distinct parents never collide for index < 2**32."""
        return RNGStream(self.master_seed, (int(self.stream_id) * 0x9E3779B97F4A7C15 + int(index) + 1) & _U64)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RNGStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return RNGStream(int(rng or 0)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")
