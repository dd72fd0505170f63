from __future__ import annotations


import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflab.control import (
    Ball,
    Box,
    ConstantPolicy,
    FeedbackPolicy,
    GeneralLagrangian,
    HamiltonianSpec,
    QuadraticBallLagrangian,
    TrigPotential,
    VerificationConfig,
    ZeroHamiltonian,
    ZeroPolicy,
    evaluate_cost,
    hjb_value,
    legendre,
    report_json,
    standard_battery,
    verification_experiment,
)
from dflab.measures import WeightSequence
from dflab.particles import ParticleEnsemble, SimulationParams

POT = TrigPotential(0.1, ((0.2, (1,), 0.0),))
LAG = QuadraticBallLagrangian(2.0, 1, POT)


def grid_sup(L, x, p, n=20001):
    """Brute-force sup over a dense control grid (independent of the package routine)."""
    R = L.R
    a = np.linspace(-R, R, n)[:, None]
    vals = -(0.5 * a[:, 0] ** 2 + L.potential(np.broadcast_to(x, a.shape))) - a[:, 0] * p[0]
    j = int(np.argmax(vals))
    return vals[j], a[j]


@settings(max_examples=40, deadline=None)
@given(p=st.floats(-6, 6), x=st.floats(0, 1))
def test_closed_form_matches_grid_sup(p, x):
    H, a = legendre(LAG, np.array([x]), np.array([p]))
    Hg, ag = grid_sup(LAG, np.array([x]), np.array([p]))
    assert float(H) == pytest.approx(float(Hg), abs=1e-6)
    assert float(a[0]) == pytest.approx(float(ag[0]), abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(p=st.floats(-6, 6), x=st.floats(0, 1), b=st.floats(-2, 2))
def test_fenchel_young(p, x, b):
    xa, pa = np.array([x]), np.array([p])
    H, a = legendre(LAG, xa, pa)
    lhs = float(H) + float(LAG.cost(xa, np.array([b]))) + p * b
    assert lhs >= -1e-12
    # equality at the maximiser
    assert float(H) + float(LAG.cost(xa, a)) + float(pa @ a) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(p=st.floats(-5, 5).filter(lambda v: abs(abs(v) - 2.0) > 1e-3), x=st.floats(0, 1))
def test_envelope_identity(p, x):
    h = 1e-6
    xa = np.array([x])
    Hp = legendre(LAG, xa, np.array([p + h]))[0]
    Hm = legendre(LAG, xa, np.array([p - h]))[0]
    a = legendre(LAG, xa, np.array([p]))[1]
    assert -(float(Hp) - float(Hm)) / (2 * h) == pytest.approx(float(a[0]), abs=1e-5)


def test_ball_hamiltonian_2d():
    L = QuadraticBallLagrangian(1.0, 2)
    H, a = legendre(L, np.zeros(2), np.array([3.0, 4.0]))
    assert float(H) == pytest.approx(5.0 - 0.5)
    np.testing.assert_allclose(a, [-0.6, -0.8])
    H0, a0 = legendre(L, np.zeros(2), np.zeros(2))
    assert float(H0) == 0 and np.all(a0 == 0)
    with pytest.raises(ValueError):
        legendre(L, np.zeros(2), np.array([np.nan, 0]))


def test_general_lagrangian_numeric_sup():
    # L = (a^4 + a^2) / 2 on the box [-1, 2], compared with a brute-force grid
    L = GeneralLagrangian(lambda x, a: 0.5 * (a[..., 0] ** 4 + a[..., 0] ** 2), Box((-1.0,), (2.0,)))
    for p in (-3.0, -0.4, 0.0, 0.7, 5.0):
        H, a = legendre(L, np.zeros(1), np.array([p]))
        grid = np.linspace(-1, 2, 300001)
        vals = -0.5 * (grid**4 + grid**2) - p * grid
        assert float(H) == pytest.approx(vals.max(), abs=1e-8)
        assert float(a[0]) == pytest.approx(grid[np.argmax(vals)], abs=1e-4)


def test_control_sets():
    b = Ball(2.0, 2)
    assert b.contains(np.array([1.2, 1.6])) and not b.contains(np.array([2.0, 0.1]))
    np.testing.assert_allclose(b.project(np.array([3.0, 4.0])), [1.2, 1.6])
    box = Box((-1.0, 0.0), (1.0, 2.0))
    np.testing.assert_allclose(box.project(np.array([5.0, -1.0])), [1.0, 0.0])
    with pytest.raises(ValueError):
        Box((0.5,), (1.0,))
    with pytest.raises(ValueError):
        Ball(-1.0)


def test_hamiltonian_spec_and_zero():
    ham = HamiltonianSpec(LAG)
    assert ham.lipschitz_p == 2.0
    assert np.all(ZeroHamiltonian().value(np.zeros((3, 1)), np.ones((3, 1))) == 0)


def test_policies_stay_in_the_control_set():
    bad = ConstantPolicy((3.0,), Ball(2.0), name="bad")
    with pytest.raises(AssertionError):
        bad(0.0, np.zeros((2, 1, 1)))
    assert np.all(ZeroPolicy(Ball(2.0))(0.0, np.ones((2, 3, 1))) == 0)


def test_constant_policy_cost_is_exact():
    L = QuadraticBallLagrangian(2.0, 1, TrigPotential(0.3))
    s = WeightSequence([0.5, 0.3, 0.2])
    init = ParticleEnsemble(s, np.array([[0.1], [0.5], [0.9]]))
    params = SimulationParams(T=0.2, dt=0.01, truncation_eps=0.25, n_paths=200, seed=1)
    out = evaluate_cost(ConstantPolicy((1.0,), L.control_set), L, None, None, init, params)
    # two retained particles; rate sum_i s_i (|a|^2/2 + c), integrated over 0.2
    assert out["mean"] == pytest.approx(0.2 * 0.8 * (0.5 + 0.3))
    assert out["stderr"] == pytest.approx(0.0, abs=1e-12)


def _small_problem():
    from dflab.cylinder import InnerFunction, cylinder, identity

    s = WeightSequence([0.6, 0.4])
    init = ParticleEnsemble(s, np.array([[0.2], [0.7]]))
    G = cylinder(identity(), InnerFunction(k=(1,), cutoff="step", eps=0.35, amplitude=2.0))
    return s, init, G


def test_feedback_policy_and_battery():
    s, init, G = _small_problem()
    v, sol = hjb_value(LAG, None, G, s, 2, init.positions, 0.1, 0.0, 16, 1e-3, stride=10)
    battery = standard_battery(sol, s, HamiltonianSpec(LAG))
    assert [p.name for p in battery] == ["optimal", "zero", "constant_plus", "constant_minus",
                                          "scaled_half", "sign_flipped"]
    opt = battery[0]
    assert isinstance(opt, FeedbackPolicy)
    a = opt(0.0, init.positions[None])
    assert a.shape == (1, 2, 1) and np.all(np.abs(a) <= 2.0 + 1e-9)
    flipped = battery[-1](0.0, init.positions[None])
    np.testing.assert_allclose(flipped, -a, atol=1e-12)
    np.testing.assert_array_equal(opt.alpha(0.0, s, init.positions, 1, eps=0.5), 0.0)
    with pytest.raises(ValueError):
        opt(0.0, np.zeros((1, 3, 1)))


def test_small_verification_experiment():
    s, init, G = _small_problem()
    params = SimulationParams(T=0.1, dt=5e-3, truncation_eps=0.35, n_paths=4000, seed=3)
    rep = verification_experiment(LAG, None, G, init, params,
                                  VerificationConfig(n_g=16, pde_dt=1e-3), )
    assert set(r["name"] for r in rep["candidates"]) >= {"optimal", "zero"}
    best = min(r["cost"] for r in rep["candidates"])
    opt = next(r for r in rep["candidates"] if r["name"] == "optimal")
    assert opt["cost"] <= best + 4 * opt["stderr"]
    assert rep["pass"], report_json(rep)
    with pytest.raises(ValueError):
        verification_experiment(LAG, None, G, init, params, VerificationConfig(n_g=16, pde_dt=3e-3))
