from __future__ import annotations

import numpy as np
import pytest

from dflab.rng import RNGStream, as_generator
from dflab.stats import chunk_sizes, estimate, map_chunks, variance_estimate, within


def test_stream_is_deterministic():
    a = RNGStream(7, 3).generator().random(5)
    b = RNGStream(7, 3).generator().random(5)
    np.testing.assert_array_equal(a, b)


def test_distinct_streams_are_uncorrelated():
    x = RNGStream(7, 0).generator().standard_normal(50_000)
    y = RNGStream(7, 1).generator().standard_normal(50_000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 3 / np.sqrt(50_000)


def test_children_distinct():
    s = RNGStream(1, 0)
    ids = {s.child(j).stream_id for j in range(1000)}
    assert len(ids) == 1000
    assert s.child(0) != s


def test_seed_validation():
    with pytest.raises(ValueError):
        RNGStream(-1)
    with pytest.raises(ValueError):
        RNGStream(1 << 64)


def test_as_generator_accepts_forms():
    for r in (RNGStream(1), np.random.default_rng(1), 1, None):
        assert isinstance(as_generator(r), np.random.Generator)


def test_estimate_and_variance():
    x = np.arange(10.0)
    e = estimate(x)
    assert e.mean == 4.5 and e.n == 10
    assert e.stderr == pytest.approx(np.std(x, ddof=1) / np.sqrt(10))
    assert estimate([3.0, 3.0]).stderr == 0.0
    g = np.random.default_rng(2).standard_normal(200_000)
    v = variance_estimate(g)
    assert abs(v.mean - 1.0) < 3 * v.stderr + 1e-3


def test_within():
    assert within(0.1, 0.05)
    assert not within(0.2, 0.05)
    assert within(0.2, 0.05, extra=0.06)


def test_chunks_independent_of_workers():
    def fn(stream, size):
        return stream.generator().random(size)

    a = map_chunks(fn, 25_001, RNGStream(9), chunk=1000, workers=1)
    b = map_chunks(fn, 25_001, RNGStream(9), chunk=1000, workers=4)
    np.testing.assert_array_equal(a, b)
    assert chunk_sizes(25_001, 1000)[-1] == 1
    assert sum(chunk_sizes(25_001, 1000)) == 25_001
