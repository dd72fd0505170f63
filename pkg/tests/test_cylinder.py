from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflab.cylinder import (
    Cosine,
    InnerFunction,
    Quadratic,
    TruncatedFunctional,
    constant,
    cylinder,
    dirichlet_form_mc,
    evaluate,
    fourier_energy,
    generator_Lc,
    hat_star,
    ibp_residual,
    identity,
    intrinsic_gradient,
    pre_cheeger,
    smooth_cutoff,
    square,
)
from dflab.measures import AtomicMeasure, TailError
from dflab.rng import RNGStream

TWO_ATOMS = AtomicMeasure([0.6, 0.4], [[0.3], [0.8]])


def mass_identity():
    return InnerFunction(k=(0,), cutoff="none", power=1)


def mixed_function(d=1):
    k1 = (1,) + (0,) * (d - 1)
    k2 = (2,) + (1,) * (d - 1)
    f = InnerFunction(k=k1, cutoff="smooth", eps=0.05, phase=0.3)
    g = InnerFunction(k=k2, cutoff="smooth", eps=0.1, power=1, amplitude=0.7)
    return cylinder(Quadratic((0.5, -1.0), ((1.0, 0.3), (0.3, -0.5)), c=0.1), f, g)


def test_hat_star_example():
    assert hat_star(mass_identity(), TWO_ATOMS) == pytest.approx(0.52)


def test_composite_example():
    u = cylinder(square(1), mass_identity())
    assert evaluate(u, TWO_ATOMS) == pytest.approx(0.2704)


def test_smooth_cutoff_shape():
    r = np.array([0.0, 0.1, 0.15, 0.2, 0.5])
    c = smooth_cutoff(r, 0.1)
    assert c[0] == 0 and c[1] == 0 and c[3] == 1 and c[4] == 1
    assert 0 < c[2] < 1
    assert c[2] == pytest.approx(0.5)
    assert np.all(np.diff(smooth_cutoff(np.linspace(0, 1, 200), 0.2)) >= 0)


def test_inner_validation():
    with pytest.raises(ValueError):
        InnerFunction(cutoff="none", eps=0.1)
    with pytest.raises(ValueError):
        InnerFunction(cutoff="bump")
    with pytest.raises(ValueError):
        InnerFunction(power=-1)
    with pytest.raises(ValueError):
        cylinder(Quadratic((1.0, 1.0)), InnerFunction(k=(1,), eps=0.1))


def test_inner_support_is_above_eps():
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.2)
    r = np.linspace(0, 0.2, 50)
    assert np.all(f.eval(r, np.full((50, 1), 0.1)) == 0)
    step = InnerFunction(k=(1,), cutoff="step", eps=0.2)
    assert step.eval(0.2, np.array([0.0])) == 1.0
    assert step.eval(0.1999, np.array([0.0])) == 0.0


def _fd_setup(seed, d):
    gen = np.random.default_rng(seed)
    m = np.sort(gen.dirichlet(np.ones(4)))[::-1]
    x = gen.random((4, d))
    return m, x


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), d=st.sampled_from([1, 2]))
def test_gradient_matches_finite_differences(seed, d):
    u = mixed_function(d)
    m, x = _fd_setup(seed, d)
    g = u.gradients(m, x)
    h = 1e-5
    for i in range(4):
        for c in range(d):
            xp, xm = x.copy(), x.copy()
            xp[i, c] += h
            xm[i, c] -= h
            fd = (u.values(m, xp) - u.values(m, xm)) / (2 * h) / m[i]
            assert fd == pytest.approx(g[i, c], rel=1e-4, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), d=st.sampled_from([1, 2]))
def test_generator_matches_finite_differences(seed, d):
    u = mixed_function(d)
    m, x = _fd_setup(seed, d)
    h = 1e-3
    total = 0.0
    u0 = u.values(m, x)
    for i in range(4):
        for c in range(d):
            xp, xm = x.copy(), x.copy()
            xp[i, c] += h
            xm[i, c] -= h
            total += (u.values(m, xp) - 2 * u0 + u.values(m, xm)) / h**2 / m[i]
    lc = u.generator_values(m, x)
    assert total == pytest.approx(lc, rel=1e-4, abs=1e-3 * (1 + abs(lc)))


@pytest.mark.parametrize("outer", [Quadratic((0.5, -1.0), ((1.0, 0.3), (0.3, -0.5))), Cosine((1.5, -2.0), 0.8, 0.2)])
def test_outer_derivatives(outer):
    y = np.array([0.3, -0.7])
    h = 1e-6
    eye = np.eye(2)
    fd_g = np.array([(outer.value(y + h * e) - outer.value(y - h * e)) / (2 * h) for e in eye])
    np.testing.assert_allclose(outer.grad(y), fd_g, rtol=1e-6, atol=1e-8)
    fd_h = np.array([(outer.grad(y + h * e) - outer.grad(y - h * e)) / (2 * h) for e in eye])
    np.testing.assert_allclose(outer.hess(y), fd_h, rtol=1e-5, atol=1e-6)


def test_quadratic_must_be_symmetric():
    with pytest.raises(ValueError):
        Quadratic((1.0, 0.0), ((1.0, 2.0), (0.0, 1.0)))


def test_single_measure_wrappers():
    u = mixed_function()
    mu = AtomicMeasure([0.5, 0.3, 0.2], [[0.1], [0.4], [0.75]])
    g = intrinsic_gradient(u, mu, 1)
    np.testing.assert_allclose(g, u.gradients(mu.masses, mu.atoms)[1])
    assert pre_cheeger(u, mu) == pytest.approx(float(np.sum(mu.masses * u.gradients(mu.masses, mu.atoms)[:, 0] ** 2)))
    assert math.isfinite(generator_Lc(u, mu))
    with pytest.raises(IndexError):
        intrinsic_gradient(u, mu, 3)


def test_tail_and_threshold_rejections():
    u = mixed_function()
    with pytest.raises(TailError):
        evaluate(u, AtomicMeasure([0.9, 0.04], [[0.0], [0.5]], tail=0.06))
    with pytest.raises(ValueError):
        generator_Lc(fourier_energy(), TWO_ATOMS)
    with pytest.raises(ValueError):
        ibp_residual(mixed_function(), fourier_energy(), 200, RNGStream(0))


def test_constant_has_zero_gradient_and_generator():
    u = cylinder(constant(2.5), InnerFunction(k=(1,), eps=0.1))
    m, x = _fd_setup(1, 1)
    assert np.all(u.gradients(m, x) == 0)
    assert u.generator_values(m, x) == 0


def test_dirichlet_form_symmetry_and_bilinearity():
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.05)
    g = InnerFunction(k=(2,), cutoff="smooth", eps=0.1, phase=0.4, power=1)
    u, v = cylinder(identity(), f), cylinder(identity(), g)
    w = cylinder(Quadratic((2.0, 3.0)), f, g)
    n, rng = 2000, RNGStream(7)
    uv = dirichlet_form_mc(u, v, n, rng)["estimate"]
    vu = dirichlet_form_mc(v, u, n, rng)["estimate"]
    assert uv == pytest.approx(vu, rel=1e-12, abs=1e-14)
    uu = dirichlet_form_mc(u, u, n, rng)["estimate"]
    uw = dirichlet_form_mc(u, w, n, rng)["estimate"]
    assert uw == pytest.approx(2 * uu + 3 * uv, rel=1e-10, abs=1e-12)
    assert uu >= 0


def test_ibp_residual_small():
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.05)
    u = cylinder(identity(), f)
    out = ibp_residual(u, u, 20_000, RNGStream(3))
    assert abs(out["residual"]) < 4 * out["combined_stderr"]
    assert out["energy"] > 0


def test_fourier_energy_on_two_atoms():
    # |0.6 e^{2 pi i 0.3} + 0.4 e^{2 pi i 0.8}|^2 = 0.36 + 0.16 + 2*0.24*cos(pi)
    assert evaluate(fourier_energy(), TWO_ATOMS) == pytest.approx(0.04)


def test_truncated_functional():
    base = cylinder(identity(), InnerFunction(k=(1,), cutoff="none"))
    t = TruncatedFunctional(base, 0.3)
    m = np.array([[0.5, 0.3, 0.2], [0.25, 0.25, 0.5]])
    a = np.array([[[0.0], [0.25], [0.5]], [[0.1], [0.2], [0.5]]])
    out = t.values(m, a)
    # first row keeps only the 0.5 atom at 0; second keeps the 0.5 atom at 0.5
    np.testing.assert_allclose(out, [1.0, -1.0])
    assert t.compat_eps == 0.3
    empty = t.values(np.array([[0.3, 0.3, 0.4]]), np.array([[[0.5], [0.5], [0.5]]]))
    np.testing.assert_allclose(empty, [-1.0])  # 0.4 atom kept at 0.5
    delta = TruncatedFunctional(base, 0.45).values(np.array([[0.3, 0.3, 0.4]]), np.array([[[0.5], [0.5], [0.5]]]))
    np.testing.assert_allclose(delta, [1.0])  # nothing kept: delta at the origin
