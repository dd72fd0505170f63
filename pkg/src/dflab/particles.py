"""Free and drifted massive particle systems on the torus.

Particle i carries the frozen mass s_i and diffuses with coefficient
sqrt(2 / s_i). Positions are kept lifted in R^d; observables and drifts see
the wrapped points. Monte Carlo runs are chunked over paths with one
counter-based stream per chunk, so estimates do not depend on the worker count.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cylinder import CylinderFunction, MeasureFunctional
from .measures import (
    DEFAULT_MASS_TOL,
    AtomicMeasure,
    TailError,
    WeightSequence,
    complete_positions,
    sample_df_batch,
    truncation_index,
)
from .rng import RNGStream
from .stats import Estimate, combined_stderr, estimate, map_chunks, variance_estimate
from .torus import wrap

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ParticleEnsemble:
    weights: WeightSequence
    positions: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1)
        if pos.shape[-2] != len(self.weights):
            raise ValueError(f"{pos.shape[-2]} positions for {len(self.weights)} stored weights")
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_measure(cls, mu: AtomicMeasure, time: float = 0.0) -> "ParticleEnsemble":
        mu = mu.ordered()
        return cls(mu.weights, mu.atoms.copy(), time)

    @property
    def d(self) -> int:
        return self.positions.shape[-1]

    def measure(self) -> AtomicMeasure:
        if self.positions.ndim != 2:
            raise ValueError("measure() needs a single configuration")
        return AtomicMeasure(self.weights.weights, wrap(self.positions), self.weights.tail)


@dataclass(frozen=True)
class SimulationParams:
    T: float
    t0: float = 0.0
    dt: float = 1e-3
    truncation_eps: float = 0.1
    n_paths: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.t0 < self.T:
            raise ValueError("SimulationParams: need 0 <= t0 < T")
        if self.dt <= 0:
            raise ValueError("SimulationParams: dt must be positive")
        steps = (self.T - self.t0) / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError("SimulationParams: dt must divide T - t0")
        if not 0 < self.truncation_eps <= 1:
            raise ValueError("SimulationParams: truncation_eps must lie in (0, 1]")
        if self.n_paths < 1:
            raise ValueError("SimulationParams: n_paths must be positive")

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


# ---- drifts
#
# A drift is called as drift(t, masses (K,) or (P, K), atoms (P, K, d), x (P, J, d))
# and returns (P, J, d). ``atoms`` and ``x`` are wrapped points.


class DriftField:
    bound: float = 0.0
    compat_eps: float = 0.0

    def __call__(self, t, masses, atoms, x) -> np.ndarray:
        raise NotImplementedError

    def at(self, t: float, mu: AtomicMeasure, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, 1, -1)
        return self(t, mu.masses, mu.atoms[None], x)[0, 0]

    def descriptor(self) -> dict:
        return {"name": type(self).__name__}


@dataclass(frozen=True)
class ZeroDrift(DriftField):
    bound: float = 0.0
    compat_eps: float = 1.0

    def __call__(self, t, masses, atoms, x):
        return np.zeros(np.shape(x))


@dataclass(frozen=True)
class ConstantDrift(DriftField):
    c: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(v) for v in np.atleast_1d(self.c)))

    @property
    def bound(self) -> float:
        return float(np.linalg.norm(self.c))

    @property
    def compat_eps(self) -> float:
        return 1.0

    def __call__(self, t, masses, atoms, x):
        return np.broadcast_to(np.asarray(self.c), np.shape(x)).copy()

    def descriptor(self) -> dict:
        return {"name": "constant", "c": list(self.c)}


@dataclass(frozen=True)
class MeanFieldSine(DriftField):
    """b(mu, x) = M * sum_{s_j >= eps} s_j sin(2 pi (x_j - x)^1) e_1: attraction to heavy atoms."""

    M: float = 1.0
    eps: float = 0.1

    @property
    def bound(self) -> float:
        return abs(self.M)

    @property
    def compat_eps(self) -> float:
        return self.eps

    def __call__(self, t, masses, atoms, x):
        masses = np.asarray(masses, dtype=float)
        w = np.where(masses >= self.eps, masses, 0.0)
        w = np.broadcast_to(w, atoms.shape[:-1])
        a = TWO_PI * atoms[..., 0]
        cs = np.sum(w * np.cos(a), axis=-1)[..., None]
        sn = np.sum(w * np.sin(a), axis=-1)[..., None]
        y = TWO_PI * x[..., 0]
        out = np.zeros(np.shape(x))
        out[..., 0] = self.M * (sn * np.cos(y) - cs * np.sin(y))
        return out

    def descriptor(self) -> dict:
        return {"name": "mean_field_sine", "M": self.M, "eps": self.eps}


@dataclass(frozen=True)
class PeriodicForce(DriftField):
    """b(x) = M sin(2 pi (x^1 - x_c)) e_1, measure independent."""

    M: float = 1.0
    center: float = 0.0

    @property
    def bound(self) -> float:
        return abs(self.M)

    @property
    def compat_eps(self) -> float:
        return 1.0

    def __call__(self, t, masses, atoms, x):
        out = np.zeros(np.shape(x))
        out[..., 0] = self.M * np.sin(TWO_PI * (x[..., 0] - self.center))
        return out

    def descriptor(self) -> dict:
        return {"name": "periodic_force", "M": self.M, "center": self.center}


# ---- free dynamics


def simulate_free(init: ParticleEnsemble, t_end: float, rng) -> ParticleEnsemble:
    """One exact Gaussian increment of variance (2/s_i)(t_end - t) per coordinate."""
    if t_end < init.time:
        raise ValueError(f"t_end {t_end} precedes the current time {init.time}")
    dt = t_end - init.time
    if dt == 0:
        return ParticleEnsemble(init.weights, init.positions.copy(), init.time)
    gen = rng.generator() if isinstance(rng, RNGStream) else rng
    sigma = np.sqrt(2.0 * dt / init.weights.weights)[:, None]
    noise = gen.standard_normal(init.positions.shape)
    return ParticleEnsemble(init.weights, init.positions + sigma * noise, t_end)


@dataclass
class FreeTrajectory:
    """Free paths of the first N particles on a time grid, with the standard
    Brownian increments dbeta that generated them (dX = sqrt(2/s) dbeta)."""

    weights: WeightSequence
    n_retained: int
    times: np.ndarray
    positions: np.ndarray  # (steps+1, P, N, d), lifted
    increments: np.ndarray | None  # (steps, P, N, d)

    @property
    def n_paths(self) -> int:
        return self.positions.shape[1]


def _fiber_masses(weights: WeightSequence) -> np.ndarray:
    return np.asarray(weights.weights, dtype=float)


def _measure_atoms(weights: WeightSequence, x_retained: np.ndarray) -> np.ndarray:
    """Atoms of em^N(s, x): the retained wrapped points completed by P_N."""
    return complete_positions(wrap(x_retained), len(weights) - x_retained.shape[-2])


def _retained(weights: WeightSequence, eps: float) -> int:
    n = truncation_index(eps, weights)
    if n == 0:
        n = 1  # no weight reaches eps: keep the top particle; eps-compatible data ignore it
    return n


def simulate_free_paths(init: ParticleEnsemble, params: SimulationParams, gen: np.random.Generator, n_paths: int,
                        n_retained: int | None = None, keep_increments: bool = True) -> FreeTrajectory:
    if init.positions.ndim != 2:
        raise ValueError("path simulation starts from a single configuration")
    n = n_retained if n_retained is not None else len(init.weights)
    s = _fiber_masses(init.weights)[:n]
    steps = params.n_steps
    x0 = np.broadcast_to(init.positions[:n], (n_paths, n, init.d))
    db = gen.standard_normal((steps, n_paths, n, init.d)) * math.sqrt(params.dt)
    dx = np.sqrt(2.0 / s)[None, None, :, None] * db
    pos = np.concatenate([x0[None], x0[None] + np.cumsum(dx, axis=0)], axis=0)
    return FreeTrajectory(init.weights, n, params.times(), pos, db if keep_increments else None)


def girsanov_inverse_weight(traj: FreeTrajectory, drift: DriftField) -> np.ndarray:
    """1/z_T along each free path: exp(sum int sqrt(s_i/2) b.dbeta - 1/2 sum int (s_i/2)|b|^2 dr).

    Left-endpoint sums over the retained particles. Returns one weight per path.
    """
    if traj.increments is None:
        raise ValueError("girsanov_inverse_weight needs the stored Brownian increments")
    masses = _fiber_masses(traj.weights)
    scale = np.sqrt(masses[: traj.n_retained] / 2.0)[None, :, None]
    log_w = np.zeros(traj.n_paths)
    dts = np.diff(traj.times)
    if isinstance(drift, ZeroDrift):
        return np.ones(traj.n_paths)
    for k, dt in enumerate(dts):
        x = traj.positions[k]
        b = drift(traj.times[k], masses, _measure_atoms(traj.weights, x), wrap(x))
        sb = scale * b
        log_w += np.sum(sb * traj.increments[k], axis=(1, 2)) - 0.5 * dt * np.sum(sb * sb, axis=(1, 2))
    return np.exp(log_w)


# ---- drifted dynamics


def _check_compat(drift: DriftField, weights: WeightSequence, params: SimulationParams) -> None:
    if drift.compat_eps < params.truncation_eps:
        raise ValueError(
            f"drift compat_eps {drift.compat_eps} is below truncation_eps {params.truncation_eps}:"
            " the drift would read dropped atoms"
        )
    if weights.tail > 0 and params.truncation_eps <= weights.tail:
        raise TailError(f"truncation_eps {params.truncation_eps} does not exceed the tail mass {weights.tail}")


@dataclass
class DriftedRun:
    weights: WeightSequence
    n_retained: int
    times: np.ndarray
    positions: np.ndarray  # terminal (P, K, d) lifted; untracked particles at completion points or free
    slices: list = field(default_factory=list)  # (t, positions (P, N, d)) at the stored stride

    def terminal_atoms(self) -> np.ndarray:
        return wrap(self.positions)


def simulate_drifted(init: ParticleEnsemble, drift: DriftField, params: SimulationParams, gen: np.random.Generator,
                     n_paths: int, evolve_tail: bool = False, stride: int = 0) -> DriftedRun:
    """Euler-Maruyama on the N(eps, s) retained particles; the drift reads em^N(s, X^{1..N}).

    With ``evolve_tail`` the remaining stored particles are moved by exact free
    increments (diagnostics only); otherwise they sit at the completion points.
    """
    if init.positions.ndim != 2:
        raise ValueError("path simulation starts from a single configuration")
    _check_compat(drift, init.weights, params)
    masses = _fiber_masses(init.weights)
    n = _retained(init.weights, params.truncation_eps)
    sig = np.sqrt(2.0 * params.dt / masses[:n])[None, :, None]
    x = np.broadcast_to(init.positions[:n], (n_paths, n, init.d)).copy()
    times = params.times()
    slices = [(times[0], x.copy())] if stride else []
    for k in range(params.n_steps):
        b = drift(times[k], masses, _measure_atoms(init.weights, x), wrap(x))
        x = x + b * params.dt + sig * gen.standard_normal(x.shape)
        if stride and ((k + 1) % stride == 0 or k + 1 == params.n_steps):
            slices.append((times[k + 1], x.copy()))
    if evolve_tail and n < len(masses):
        rest = np.broadcast_to(init.positions[n:], (n_paths, len(masses) - n, init.d))
        sigma = np.sqrt(2.0 * (params.T - params.t0) / masses[n:])[None, :, None]
        full = np.concatenate([x, rest + sigma * gen.standard_normal(rest.shape)], axis=1)
    else:
        full = _measure_atoms(init.weights, x)
    return DriftedRun(init.weights, n, times, full, slices)


def _check_observable(g: MeasureFunctional, params: SimulationParams) -> None:
    if g.compat_eps < params.truncation_eps:
        raise ValueError(
            f"observable compat_eps {g.compat_eps} is below truncation_eps {params.truncation_eps}"
        )


def _result(est: Estimate, params: SimulationParams, **extra) -> dict:
    out = {"mean": est.mean, "stderr": est.stderr, "n": est.n, "dt": params.dt, "seed": params.seed}
    out.update(extra)
    return out


def estimate_terminal(g: MeasureFunctional, init: ParticleEnsemble, drift: DriftField, params: SimulationParams,
                      workers: int = 1, chunk: int = 5_000) -> dict:
    """Direct Monte Carlo of E[g(mu_T)] under the drifted dynamics."""
    _check_observable(g, params)
    _check_compat(drift, init.weights, params)
    masses = _fiber_masses(init.weights)

    def run(stream: RNGStream, size: int) -> np.ndarray:
        res = simulate_drifted(init, drift, params, stream.generator(), size)
        return g.values(masses, res.terminal_atoms())

    vals = map_chunks(run, params.n_paths, RNGStream(params.seed, 1), chunk=chunk, workers=workers)
    return _result(estimate(vals), params)


def importance_sampled_terminal(g: MeasureFunctional, init: ParticleEnsemble, drift: DriftField,
                                params: SimulationParams, workers: int = 1, chunk: int = 5_000) -> dict:
    """E_P[(1/z_T) g(mu_T)] over free paths; also reports E[1/z_T] and E[(1/z_T)^2]."""
    _check_observable(g, params)
    _check_compat(drift, init.weights, params)
    masses = _fiber_masses(init.weights)
    n = _retained(init.weights, params.truncation_eps)

    def run(stream: RNGStream, size: int) -> np.ndarray:
        traj = simulate_free_paths(init, params, stream.generator(), size, n_retained=n)
        w = girsanov_inverse_weight(traj, drift)
        gv = g.values(masses, _measure_atoms(init.weights, traj.positions[-1]))
        return np.stack([w * gv, w], axis=1)

    vals = map_chunks(run, params.n_paths, RNGStream(params.seed, 2), chunk=chunk, workers=workers)
    w = estimate(vals[:, 1])
    w2 = estimate(vals[:, 1] ** 2)
    return _result(estimate(vals[:, 0]), params, weight_mean=w.mean, weight_stderr=w.stderr,
                   weight_second_moment=w2.mean, weight_second_moment_stderr=w2.stderr)


def heat_oracle_linear(s: np.ndarray, x0: np.ndarray, mass_factor: np.ndarray, k: Sequence[int], dt: float,
                       phase: float = 0.0) -> float:
    """E[sum_i s_i m_i cos(2 pi k.X_i + phase)] under free motion for time dt."""
    s = np.asarray(s, dtype=float)
    kk = np.asarray(k, dtype=float)
    lam = 4.0 * math.pi**2 * float(kk @ kk)
    x0 = np.asarray(x0, dtype=float).reshape(len(s), -1)
    return float(np.sum(s * mass_factor * np.cos(TWO_PI * (x0 @ kk) + phase) * np.exp(-lam * dt / s)))


# ---- invariance of the Dirichlet-Ferguson law


def _free_move(gen, masses, atoms, t):
    safe = np.where(masses > 0, masses, 1.0)
    sigma = np.sqrt(2.0 * t / safe)[..., None]
    return wrap(atoms + sigma * gen.standard_normal(atoms.shape))


def invariance_test(test_fns: Sequence[CylinderFunction], t: float, n: int, rng: RNGStream, d: int = 1,
                    mass_tol: float = DEFAULT_MASS_TOL, k: float = 3.0, workers: int = 1) -> list[dict]:
    """Compare u(mu_0), mu_0 ~ DF, with u(mu_t) for free dynamics from fresh DF samples.

    Each row reports means and variances at both times with their standard
    errors, and the largest pathwise change |u(mu_t) - u(mu_0)| on the
    evolved sample.
    """
    if t <= 0:
        raise ValueError("invariance_test needs t > 0")
    m = len(test_fns)

    def run(stream: RNGStream, size: int) -> np.ndarray:
        gen = stream.generator()
        a = sample_df_batch(gen, size, d, mass_tol)
        b = sample_df_batch(gen, size, d, mass_tol)
        moved = _free_move(gen, b.masses, b.atoms, t)
        out = np.empty((size, 3 * m))
        for j, u in enumerate(test_fns):
            for batch in (a, b):
                if batch.tails.max() > 0 and u.threshold <= batch.tails.max():
                    raise TailError("test function threshold below the sampler tail")
            out[:, j] = u.values(a.masses, a.atoms)
            out[:, m + j] = u.values(b.masses, moved)
            out[:, 2 * m + j] = out[:, m + j] - u.values(b.masses, b.atoms)
        return out

    vals = map_chunks(run, n, rng, workers=workers)
    rows = []
    for j, u in enumerate(test_fns):
        e0, et = estimate(vals[:, j]), estimate(vals[:, m + j])
        v0, vt = variance_estimate(vals[:, j]), variance_estimate(vals[:, m + j])
        se_mean = combined_stderr(e0.stderr, et.stderr)
        se_var = combined_stderr(v0.stderr, vt.stderr)
        rows.append({
            "name": u.name or f"u{j}",
            "t": t,
            "n": n,
            "mean_0": e0.mean, "mean_t": et.mean, "mean_stderr": se_mean,
            "var_0": v0.mean, "var_t": vt.mean, "var_stderr": se_var,
            "max_pathwise_change": float(np.max(np.abs(vals[:, 2 * m + j]))),
            "mean_pass": abs(et.mean - e0.mean) <= k * se_mean,
            "var_pass": abs(vt.mean - v0.mean) <= k * se_var,
        })
    return rows


# ---- Ito formula for cylinder functions


def ito_residual(u: CylinderFunction, init: ParticleEnsemble, t_end: float, n: int, rng: RNGStream,
                 dt: float = 1e-3, workers: int = 1, chunk: int = 5_000) -> dict:
    """u(mu_T) - u(mu_0) - int_0^T L_c u(mu_r) dr per free path (left-endpoint quadrature).

    Returns the residual mean/stderr together with the two averaged terms.
    """
    if u.threshold <= 0:
        raise ValueError("ito_residual requires u.threshold > 0")
    if init.weights.tail > 0 and u.threshold <= init.weights.tail:
        raise TailError("u.threshold does not exceed the tail mass of the initial weights")
    params = SimulationParams(T=init.time + t_end, t0=init.time, dt=dt, truncation_eps=1.0, n_paths=n)
    masses = _fiber_masses(init.weights)
    u0 = float(u.values(masses, wrap(init.positions)))

    def run(stream: RNGStream, size: int) -> np.ndarray:
        gen = stream.generator()
        x = np.broadcast_to(init.positions, (size,) + init.positions.shape).copy()
        sig = np.sqrt(2.0 * dt / masses)[None, :, None]
        integral = np.zeros(size)
        for _ in range(params.n_steps):
            integral += dt * u.generator_values(masses, wrap(x))
            x += sig * gen.standard_normal(x.shape)
        uT = u.values(masses, wrap(x))
        return np.stack([uT - u0 - integral, uT, integral], axis=1)

    vals = map_chunks(run, n, rng, chunk=chunk, workers=workers)
    r, uT, integ = (estimate(vals[:, j]) for j in range(3))
    return {
        "residual": r.mean, "stderr": r.stderr, "n": n, "dt": dt,
        "u0": u0, "E_uT": uT.mean, "E_uT_stderr": uT.stderr,
        "E_int_Lc": integ.mean, "E_int_Lc_stderr": integ.stderr,
    }


# ---- trajectory dumps


def dump_trajectory(path, weights: WeightSequence, slices, max_paths: int = 16) -> None:
    """JSON lines, one record per stored time slice."""
    with open(path, "w") as fh:
        for t, x in slices:
            rec = {"t": float(t), "weights": list(map(float, weights.weights[: x.shape[-2]])),
                   "positions": wrap(x[:max_paths]).tolist()}
            fh.write(json.dumps(rec) + "\n")
