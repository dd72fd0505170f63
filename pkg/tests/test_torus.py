from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dflab.torus import fourier_eigenvalue, plane_wave, torus_distance, wrap

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def test_wrap_examples():
    assert wrap(1.25)[0] == pytest.approx(0.25)
    assert wrap(-0.3)[0] == pytest.approx(0.7)
    np.testing.assert_array_equal(wrap([2.0, -1.0]), [0.0, 0.0])


def test_wrap_rejects_non_finite():
    with pytest.raises(ValueError):
        wrap([np.nan])
    with pytest.raises(ValueError):
        wrap([np.inf, 0.0])


def test_wrap_tiny_negative_stays_below_one():
    out = wrap(-1e-18)
    assert 0.0 <= out[0] < 1.0


@given(st.lists(finite, min_size=1, max_size=4))
def test_wrap_in_unit_cube_and_idempotent(y):
    w = wrap(y)
    assert np.all((w >= 0) & (w < 1))
    np.testing.assert_array_equal(wrap(w), w)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=2), st.lists(st.integers(-50, 50), min_size=2, max_size=2))
def test_wrap_integer_shift(y, z):
    a = wrap(np.array(y))
    b = wrap(np.array(y) + np.array(z))
    assert torus_distance(a, b) < 1e-9


def test_distance_examples():
    assert torus_distance(0.1, 0.9) == pytest.approx(0.2)
    assert torus_distance([0.3, 0.4], [0.3, 0.4]) == 0.0
    assert torus_distance([0.0, 0.0], [0.5, 0.5]) == pytest.approx(math.sqrt(2) / 2)


def test_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        torus_distance([0.1], [0.1, 0.2])


pts = st.lists(st.floats(0, 1, exclude_max=True), min_size=3, max_size=3)


@given(pts, pts, pts)
def test_distance_metric_properties(a, b, c):
    dab, dba = torus_distance(a, b), torus_distance(b, a)
    assert dab == pytest.approx(dba)
    assert dab <= math.sqrt(3) / 2 + 1e-12
    assert torus_distance(a, c) <= dab + torus_distance(b, c) + 1e-12


def test_fourier_eigen_data():
    assert fourier_eigenvalue([1, 0]) == pytest.approx(4 * math.pi**2)
    assert fourier_eigenvalue([1, 2, -1]) == pytest.approx(4 * math.pi**2 * 6)
    x = np.random.default_rng(0).random((5, 2))
    h = 1e-4
    k = np.array([2, -1])
    lap = sum((plane_wave(k, x + h * e) - 2 * plane_wave(k, x) + plane_wave(k, x - h * e)) / h**2
              for e in np.eye(2))
    np.testing.assert_allclose(lap, -fourier_eigenvalue(k) * plane_wave(k, x), rtol=1e-5, atol=1e-4)
