"""Lagrangians, Hamiltonians, fiber feedback policies and the verification experiment.

Running cost L(x, a) over a compact convex control set A containing 0, and
H(x, p) = sup_{a in A} {-L(x, a) - p.a}. Feedback controls use the envelope
identity -grad_p H(x, p) = a*(x, p), with p = grad_i h / s_i read off the HJB
grid solution by multilinear interpolation.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .measures import WeightSequence, complete_positions, truncation_index
from .particles import ParticleEnsemble, SimulationParams
from .pde import (
    FiberProblem,
    Solution,
    TensorGrid,
    calibrate_budget,
    extract_gradient,
    interpolate,
    solve_hjb,
)
from .rng import RNGStream
from .stats import estimate, map_chunks
from .torus import wrap

TWO_PI = 2.0 * math.pi


# ---- control sets


@dataclass(frozen=True)
class Ball:
    R: float
    d: int = 1

    def __post_init__(self):
        if self.R < 0:
            raise ValueError("ball radius must be nonnegative")

    @property
    def radius(self) -> float:
        return self.R

    def contains(self, a, tol: float = 1e-12) -> np.ndarray:
        return np.linalg.norm(np.asarray(a), axis=-1) <= self.R * (1 + tol) + tol

    def project(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        n = np.linalg.norm(a, axis=-1, keepdims=True)
        return np.where(n > self.R, a * (self.R / np.where(n > 0, n, 1.0)), a)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return -self.R * np.ones(self.d), self.R * np.ones(self.d)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo, hi = np.atleast_1d(self.lo).astype(float), np.atleast_1d(self.hi).astype(float)
        if lo.shape != hi.shape or np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("Box must contain the origin")
        object.__setattr__(self, "lo", tuple(lo))
        object.__setattr__(self, "hi", tuple(hi))

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))

    def contains(self, a, tol: float = 1e-12) -> np.ndarray:
        a = np.asarray(a)
        return np.all((a >= np.asarray(self.lo) - tol) & (a <= np.asarray(self.hi) + tol), axis=-1)

    def project(self, a) -> np.ndarray:
        return np.clip(a, self.lo, self.hi)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lo), np.asarray(self.hi)


# ---- Lagrangians


@dataclass(frozen=True)
class TrigPotential:
    """c(x) = c0 + sum_j amp_j cos(2 pi k_j . x + phase_j)."""

    c0: float = 0.0
    terms: tuple = ()  # (amp, k tuple, phase)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], float(self.c0))
        for amp, k, phase in self.terms:
            out = out + amp * np.cos(TWO_PI * (x @ np.asarray(k, dtype=float)) + phase)
        return out

    @property
    def sup(self) -> float:
        return abs(self.c0) + sum(abs(t[0]) for t in self.terms)


@dataclass(frozen=True)
class QuadraticBallLagrangian:
    """L(x, a) = |a|^2 / 2 + c(x) on the ball |a| <= R."""

    R: float
    d: int = 1
    potential: TrigPotential = field(default_factory=TrigPotential)

    @property
    def control_set(self) -> Ball:
        return Ball(self.R, self.d)

    @property
    def inf_bound(self) -> float:
        return self.potential.sup

    def cost(self, x, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return 0.5 * np.sum(a * a, axis=-1) + self.potential(x)

    def descriptor(self) -> dict:
        return {"name": "quadratic_ball", "R": self.R, "d": self.d, "c0": self.potential.c0,
                "terms": [[amp, list(k), ph] for amp, k, ph in self.potential.terms]}


@dataclass(frozen=True)
class GeneralLagrangian:
    """Arbitrary strictly convex rate fn(x, a) on a Ball or Box; Legendre transform by numeric sup."""

    fn: Callable
    control_set: Ball | Box
    inf_bound: float = 1.0

    @property
    def d(self) -> int:
        return self.control_set.d

    def cost(self, x, a) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=float), np.asarray(a, dtype=float)), dtype=float)


def _numeric_sup(L, x: np.ndarray, p: np.ndarray, tol: float = 1e-6) -> tuple[float, np.ndarray]:
    """Maximise -L(x, a) - p.a over the control set by grid search with shrinking refinement."""
    aset = L.control_set
    lo, hi = aset.bounds()
    d = len(lo)
    n = 41 if d == 1 else (15 if d == 2 else 7)
    center = np.zeros(d)
    half = (hi - lo) / 2.0
    center = (hi + lo) / 2.0
    best_a, best_v = np.zeros(d), -math.inf
    while True:
        axes = [np.linspace(c - w, c + w, n) for c, w in zip(center, half)]
        cand = np.array(list(itertools.product(*axes)))
        cand = aset.project(cand) if isinstance(aset, Box) else cand[aset.contains(cand)]
        if cand.size:
            vals = -L.cost(np.broadcast_to(x, cand.shape), cand) - cand @ p
            j = int(np.argmax(vals))
            if vals[j] > best_v:
                best_v, best_a = float(vals[j]), cand[j].copy()
        if np.max(half) < tol:
            break
        center = best_a
        half = half * (4.0 / (n - 1))
    return best_v, best_a


def legendre(L, x, p) -> tuple[np.ndarray, np.ndarray]:
    """(H(x, p), a*(x, p)). Vectorised closed form for QuadraticBallLagrangian, numeric otherwise."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("legendre: non-finite momentum")
    x = np.asarray(x, dtype=float)
    if isinstance(L, QuadraticBallLagrangian):
        norm = np.linalg.norm(p, axis=-1)
        inside = norm <= L.R
        safe = np.where(norm > 0, norm, 1.0)
        a = np.where(inside[..., None], -p, -L.R * p / safe[..., None])
        H = np.where(inside, 0.5 * norm**2, L.R * norm - 0.5 * L.R**2) - L.potential(x)
        return H, a
    xs = np.broadcast_to(x, p.shape).reshape(-1, p.shape[-1])
    ps = p.reshape(-1, p.shape[-1])
    out = [_numeric_sup(L, xi, pi) for xi, pi in zip(xs, ps)]
    H = np.array([v for v, _ in out]).reshape(p.shape[:-1])
    a = np.array([a for _, a in out]).reshape(p.shape)
    return H, a


@dataclass(frozen=True)
class HamiltonianSpec:
    lagrangian: object

    def value(self, x, p) -> np.ndarray:
        return legendre(self.lagrangian, x, p)[0]

    def argmax(self, x, p) -> np.ndarray:
        return legendre(self.lagrangian, x, p)[1]

    @property
    def lipschitz_p(self) -> float:
        return self.lagrangian.control_set.radius


@dataclass(frozen=True)
class ZeroHamiltonian:
    lipschitz_p: float = 0.0

    def value(self, x, p):
        return np.zeros(np.shape(p)[:-1])


# ---- policies
#
# A policy maps (t, retained positions (P, N, d) lifted) to controls (P, N, d).


class Policy:
    name: str = "policy"
    control_set: Ball | Box

    def raw(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        a = self.raw(t, x)
        if not np.all(self.control_set.contains(a, tol=1e-9)):
            raise AssertionError(f"policy {self.name} left the control set")
        return a


@dataclass
class ZeroPolicy(Policy):
    control_set: Ball | Box
    name: str = "zero"

    def raw(self, t, x):
        return np.zeros(np.shape(x))


@dataclass
class ConstantPolicy(Policy):
    a0: tuple
    control_set: Ball | Box
    name: str = "constant"

    def raw(self, t, x):
        return np.broadcast_to(np.asarray(self.a0, dtype=float), np.shape(x)).copy()


@dataclass
class FeedbackPolicy(Policy):
    """alpha^i(t, x) = a*(x_i, scale * grad_i h_t(x) / s_i) for i < N; zero beyond N."""

    solution: Solution
    weights: WeightSequence
    hamiltonian: HamiltonianSpec
    scale: float = 1.0
    name: str = "optimal"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.solution.grid.N > len(self.weights):
            raise ValueError("feedback: solution fiber larger than the weight sequence")
        self.control_set = self.hamiltonian.lagrangian.control_set

    @property
    def N(self) -> int:
        return self.solution.grid.N

    def _grads(self, j: int):
        if j not in self._cache:
            grid = self.solution.grid
            self._cache[j] = [extract_gradient(self.solution.values[j], grid, i) for i in range(grid.N)]
        return self._cache[j]

    def slice_index(self, t: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.solution.times) - t)))

    def raw(self, t, x):
        x = np.asarray(x, dtype=float)
        grid = self.solution.grid
        if x.shape[-2] != grid.N:
            raise ValueError(f"feedback expects {grid.N} retained particles, got {x.shape[-2]}")
        grads = self._grads(self.slice_index(t))
        flat = x.reshape(-1, grid.N, grid.d)
        out = np.zeros(flat.shape)
        for i in range(grid.N):
            p = np.stack([interpolate(grads[i][..., c], flat, grid) for c in range(grid.d)], axis=-1)
            out[:, i, :] = self.hamiltonian.argmax(wrap(flat[:, i, :]), self.scale * p / self.weights.weights[i])
        return out.reshape(x.shape)

    def alpha(self, t: float, mu_weights: WeightSequence, x: np.ndarray, i: int, eps: float) -> np.ndarray:
        """Control of particle i (0-based); zero when i is beyond N(eps, s)."""
        if i >= truncation_index(eps, mu_weights):
            return np.zeros(x.shape[-1])
        return self(t, np.asarray(x)[None, : self.N])[0, i]


def standard_battery(solution: Solution, weights: WeightSequence, ham: HamiltonianSpec) -> list[Policy]:
    aset = ham.lagrangian.control_set
    d = aset.d
    e1 = np.zeros(d)
    e1[0] = aset.radius / 2.0
    return [
        FeedbackPolicy(solution, weights, ham, 1.0, name="optimal"),
        ZeroPolicy(aset),
        ConstantPolicy(tuple(e1), aset, name="constant_plus"),
        ConstantPolicy(tuple(-e1), aset, name="constant_minus"),
        FeedbackPolicy(solution, weights, ham, 0.5, name="scaled_half"),
        FeedbackPolicy(solution, weights, ham, -1.0, name="sign_flipped"),
    ]


# ---- cost evaluation


def evaluate_cost(policy: Policy, L, F, G, init: ParticleEnsemble, params: SimulationParams,
                  n_retained: int | None = None, workers: int = 1, stream_id: int = 0, chunk: int = 5_000) -> dict:
    """MC of int [F(mu_r) + sum_{i<=N} s_i L(X_r^i, alpha_r^i)] dr + G(mu_T) under Euler-Maruyama."""
    masses = np.asarray(init.weights.weights, dtype=float)
    for fn in (F, G):
        if fn is not None and fn.compat_eps < params.truncation_eps:
            raise ValueError("cost functionals must be compatible at the truncation level")
    n = n_retained or max(truncation_index(params.truncation_eps, init.weights), 1)
    sig = np.sqrt(2.0 * params.dt / masses[:n])[None, :, None]
    times = params.times()
    tail = len(masses) - n

    def run(stream: RNGStream, size: int) -> np.ndarray:
        gen = stream.generator()
        x = np.broadcast_to(init.positions[:n], (size, n, init.d)).copy()
        total = np.zeros(size)
        for k in range(params.n_steps):
            a = policy(times[k], x)
            xw = wrap(x)
            rate = np.sum(masses[:n] * L.cost(xw, a), axis=-1)
            if F is not None:
                rate = rate + F.values(masses, complete_positions(xw, tail))
            total += params.dt * rate
            x = x + a * params.dt + sig * gen.standard_normal(x.shape)
        if G is not None:
            total += G.values(masses, complete_positions(wrap(x), tail))
        return total

    vals = map_chunks(run, params.n_paths, RNGStream(params.seed, 100 + stream_id), chunk=chunk, workers=workers)
    e = estimate(vals)
    return {"mean": e.mean, "stderr": e.stderr, "n": e.n, "dt": params.dt, "seed": params.seed}


# ---- verification


@dataclass
class VerificationConfig:
    n_g: int = 64
    pde_dt: float = 1e-4
    scheme: str = "central"
    budget_safety: float = 2.0


def hjb_value(L, F, G, weights: WeightSequence, N: int, x: np.ndarray, T: float, t0: float,
              n_g: int, dt: float, scheme: str = "central", stride: int = 0) -> tuple[float, Solution]:
    grid = TensorGrid(len(x[0]), N, n_g)
    ham = HamiltonianSpec(L)
    p = FiberProblem(weights, N, G, T=T, t0=t0, source=F, hamiltonian=ham)
    sol = solve_hjb(p, grid, dt, stride=stride, scheme=scheme)
    return float(interpolate(sol.initial, np.asarray(x)[None, :N], grid)[0]), sol


def verification_experiment(L, F, G, init: ParticleEnsemble, params: SimulationParams,
                            config: VerificationConfig | None = None,
                            candidates: Sequence[Policy] | None = None, workers: int = 1, k: float = 3.0) -> dict:
    """Compare the HJB value at the fiber point with simulated costs of a policy battery.

    Budget: the heat-oracle calibration scaled by the oscillation of G, plus a
    self-convergence estimate from re-solving at n_g/2 and at 2 dt.
    """
    cfg = config or VerificationConfig()
    s = init.weights
    N = max(truncation_index(params.truncation_eps, s), 1)
    stride = int(round(params.dt / cfg.pde_dt))
    if stride < 1 or abs(stride * cfg.pde_dt - params.dt) > 1e-12:
        raise ValueError("simulation dt must be a multiple of the PDE dt")
    x = init.positions[:N]
    v, sol = hjb_value(L, F, G, s, N, x, params.T, params.t0, cfg.n_g, cfg.pde_dt, cfg.scheme, stride)
    v_coarse, _ = hjb_value(L, F, G, s, N, x, params.T, params.t0, cfg.n_g // 2, cfg.pde_dt, cfg.scheme)
    v_dt2, _ = hjb_value(L, F, G, s, N, x, params.T, params.t0, cfg.n_g, 2 * cfg.pde_dt, cfg.scheme)
    heat = calibrate_budget(s.weights[:N], cfg.n_g, cfg.pde_dt, params.T - params.t0, cfg.budget_safety,
                            d=init.d)
    osc = float(np.max(sol.values[-1]) - np.min(sol.values[-1]))
    budget = heat(1.0 / cfg.n_g, cfg.pde_dt, osc) + abs(v - v_coarse) / 3.0 + abs(v - v_dt2)
    ham = HamiltonianSpec(L)
    cands = list(candidates) if candidates is not None else standard_battery(sol, s, ham)
    rows = []
    for j, pol in enumerate(cands):
        c = evaluate_cost(pol, L, F, G, init, params, n_retained=N, workers=workers, stream_id=j)
        lower_ok = c["mean"] >= v - k * c["stderr"] - budget
        row = {"name": pol.name, "cost": c["mean"], "stderr": c["stderr"], "pass": bool(lower_ok),
               "excess": c["mean"] - v}
        if pol.name == "optimal":
            row["pass"] = bool(lower_ok and abs(c["mean"] - v) <= k * c["stderr"] + budget)
        rows.append(row)
    return {
        "fiber": {"s": list(map(float, s.weights[:N])), "x": np.asarray(x).tolist()},
        "v_pde": v,
        "v_coarse_grid": v_coarse,
        "v_double_dt": v_dt2,
        "budget": budget,
        "heat_calibration": heat.to_dict(),
        "candidates": rows,
        "pass": all(r["pass"] for r in rows),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
