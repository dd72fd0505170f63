from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflab.cylinder import InnerFunction, cylinder, identity
from dflab.measures import AtomicMeasure, TailError, WeightSequence
from dflab.particles import (
    ConstantDrift,
    MeanFieldSine,
    ParticleEnsemble,
    PeriodicForce,
    SimulationParams,
    ZeroDrift,
    dump_trajectory,
    estimate_terminal,
    girsanov_inverse_weight,
    heat_oracle_linear,
    importance_sampled_terminal,
    invariance_test,
    ito_residual,
    simulate_drifted,
    simulate_free,
    simulate_free_paths,
)
from dflab.rng import RNGStream

S = WeightSequence([0.5, 0.3, 0.15, 0.05])
X0 = np.array([[0.1], [0.45], [0.8], [0.3]])
INIT = ParticleEnsemble(S, X0)


def linear_observable(eps=0.1, k=1):
    return cylinder(identity(), InnerFunction(k=(k,), cutoff="step", eps=eps), name="cos")


def test_ensemble_validation_and_measure():
    with pytest.raises(ValueError):
        ParticleEnsemble(S, np.zeros((3, 1)))
    mu = ParticleEnsemble(S, X0 + 1.0).measure()
    np.testing.assert_allclose(mu.atoms, X0)
    back = ParticleEnsemble.from_measure(AtomicMeasure([0.3, 0.7], [[0.2], [0.9]]))
    np.testing.assert_array_equal(back.weights.weights, [0.7, 0.3])
    np.testing.assert_array_equal(back.positions[:, 0], [0.9, 0.2])


def test_params_validation():
    with pytest.raises(ValueError):
        SimulationParams(T=0.1, dt=0.03)
    with pytest.raises(ValueError):
        SimulationParams(T=0.1, t0=0.2)
    p = SimulationParams(T=0.1, t0=0.05, dt=0.01)
    assert p.n_steps == 5
    np.testing.assert_allclose(p.times(), np.linspace(0.05, 0.1, 6))


def test_simulate_free_zero_time_is_identity():
    out = simulate_free(INIT, 0.0, RNGStream(0))
    np.testing.assert_array_equal(out.positions, X0)
    with pytest.raises(ValueError):
        simulate_free(ParticleEnsemble(S, X0, time=1.0), 0.5, RNGStream(0))


def test_simulate_free_variance():
    gen = RNGStream(1).generator()
    t = 0.01
    batch = ParticleEnsemble(S, np.broadcast_to(X0, (40_000, 4, 1)))
    out = simulate_free(batch, t, gen)
    var = np.var(out.positions - X0, axis=0)[:, 0]
    np.testing.assert_allclose(var, 2 * t / S.weights, rtol=0.04)


def test_free_paths_increments_reconstruct_positions():
    p = SimulationParams(T=0.02, dt=0.005)
    traj = simulate_free_paths(INIT, p, RNGStream(2).generator(), 7)
    dx = traj.positions[1:] - traj.positions[:-1]
    np.testing.assert_allclose(dx, np.sqrt(2 / S.weights)[None, None, :, None] * traj.increments)


def test_drift_reductions():
    m = S.weights
    atoms = X0[None]
    x = np.array([[[0.2]]])
    np.testing.assert_array_equal(ZeroDrift()(0, m, atoms, x), 0)
    np.testing.assert_allclose(ConstantDrift((0.5,))(0, m, atoms, x), [[[0.5]]])
    b = MeanFieldSine(M=2.0, eps=0.1)(0, m, atoms, x)[0, 0, 0]
    direct = 2.0 * sum(s * math.sin(2 * math.pi * (a - 0.2)) for s, a in zip(m, X0[:, 0]) if s >= 0.1)
    assert b == pytest.approx(direct)
    assert MeanFieldSine(M=0.0)(0, m, atoms, x)[0, 0, 0] == 0
    assert PeriodicForce(M=1.5, center=0.2)(0, m, atoms, x)[0, 0, 0] == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-0.5, 0.5))
def test_mean_field_drift_is_translation_equivariant(shift):
    drift = MeanFieldSine(M=1.3, eps=0.1)
    x = np.array([[[0.05], [0.6]]])
    b0 = drift(0, S.weights, X0[None], x)
    b1 = drift(0, S.weights, X0[None] + shift, x + shift)
    np.testing.assert_allclose(b0, b1, atol=1e-12)


def test_zero_drift_girsanov_weight_is_one():
    p = SimulationParams(T=0.02, dt=0.005)
    traj = simulate_free_paths(INIT, p, RNGStream(3).generator(), 5)
    np.testing.assert_array_equal(girsanov_inverse_weight(traj, ZeroDrift()), 1.0)


def test_girsanov_weight_has_unit_mean():
    p = SimulationParams(T=0.1, dt=0.01)
    traj = simulate_free_paths(INIT, p, RNGStream(4).generator(), 20_000, n_retained=3)
    w = girsanov_inverse_weight(traj, MeanFieldSine(M=1.0, eps=0.1))
    assert abs(w.mean() - 1) < 4 * w.std() / math.sqrt(w.size)


def test_constant_drift_terminal_mean():
    c = 0.7
    p = SimulationParams(T=0.05, dt=0.01, truncation_eps=0.1, n_paths=20_000, seed=5)
    g = linear_observable()
    out = estimate_terminal(g, INIT, ConstantDrift((c,)), p)
    exact = heat_oracle_linear(S.weights, X0 + c * 0.05, np.array([1, 1, 1, 0.0]), (1,), 0.05)
    assert abs(out["mean"] - exact) < 4 * out["stderr"]


def test_direct_and_importance_sampled_agree():
    p = SimulationParams(T=0.05, dt=0.01, truncation_eps=0.1, n_paths=20_000, seed=6)
    g = linear_observable()
    drift = MeanFieldSine(M=1.0, eps=0.1)
    a = estimate_terminal(g, INIT, drift, p)
    b = importance_sampled_terminal(g, INIT, drift, p)
    assert abs(a["mean"] - b["mean"]) < 4 * math.hypot(a["stderr"], b["stderr"])
    assert abs(b["weight_mean"] - 1) < 4 * b["weight_stderr"]


def test_estimates_do_not_depend_on_workers():
    p = SimulationParams(T=0.02, dt=0.01, truncation_eps=0.1, n_paths=3000, seed=7)
    g = linear_observable()
    drift = MeanFieldSine(M=1.0, eps=0.1)
    a = estimate_terminal(g, INIT, drift, p, workers=1, chunk=1000)
    b = estimate_terminal(g, INIT, drift, p, workers=3, chunk=1000)
    assert a == b


def test_drift_masses_are_conserved():
    p = SimulationParams(T=0.02, dt=0.01, truncation_eps=0.1)
    run = simulate_drifted(INIT, MeanFieldSine(eps=0.1), p, RNGStream(8).generator(), 4, stride=1)
    assert run.weights is S
    assert run.n_retained == 3
    assert run.positions.shape == (4, 4, 1)
    assert len(run.slices) == 3


def test_compat_errors():
    p = SimulationParams(T=0.02, dt=0.01, truncation_eps=0.3)
    with pytest.raises(ValueError, match="compat_eps"):
        simulate_drifted(INIT, MeanFieldSine(eps=0.1), p, RNGStream(0).generator(), 2)
    with pytest.raises(ValueError, match="observable"):
        estimate_terminal(linear_observable(eps=0.1), INIT, ZeroDrift(), p)
    tailed = ParticleEnsemble(WeightSequence([0.6, 0.3], tail=0.1), X0[:2])
    with pytest.raises(TailError):
        simulate_drifted(tailed, ZeroDrift(), SimulationParams(T=0.02, dt=0.01, truncation_eps=0.05),
                         RNGStream(0).generator(), 2)


def test_heat_oracle_linear_decay():
    v = heat_oracle_linear(np.array([1.0]), np.array([0.0]), np.array([1.0]), (1,), 0.1)
    assert v == pytest.approx(math.exp(-4 * math.pi**2 * 0.1))


def test_invariance_rows():
    u = cylinder(identity(), InnerFunction(k=(1,), eps=0.05), name="c")
    rows = invariance_test([u], 0.1, 4000, RNGStream(9))
    assert rows[0]["name"] == "c" and rows[0]["mean_pass"] and rows[0]["var_pass"]
    assert rows[0]["max_pathwise_change"] > 0
    with pytest.raises(ValueError):
        invariance_test([u], 0.0, 100, RNGStream(9))


def test_ito_residual_small():
    u = cylinder(identity(), InnerFunction(k=(1,), cutoff="smooth", eps=0.02))
    out = ito_residual(u, INIT, 0.02, 4000, RNGStream(10), dt=1e-3)
    assert abs(out["residual"]) < 4 * out["stderr"] + 0.01


def test_dump_trajectory(tmp_path):
    p = SimulationParams(T=0.02, dt=0.01, truncation_eps=0.1)
    run = simulate_drifted(INIT, ZeroDrift(), p, RNGStream(11).generator(), 3, stride=1)
    path = tmp_path / "traj.jsonl"
    dump_trajectory(path, S, run.slices, max_paths=2)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["t"] for r in recs] == pytest.approx([0.0, 0.01, 0.02])
    assert np.array(recs[0]["positions"]).shape == (2, 3, 1)
    assert recs[0]["weights"] == [0.5, 0.3, 0.15]
