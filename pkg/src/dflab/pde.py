"""Fiber PDE solvers on tensor grids of (T^d)^N.

With the weight vector s frozen, the backward equations are

    linear:  d_t h + sum_i (1/s_i) Lap_i h + sum_i b_i . grad_i h = 0
    HJB:     d_t k + sum_i (1/s_i) Lap_i k - sum_i s_i H(x_i, grad_i k / s_i) + f = 0

Steps go backward from the terminal data: an explicit transport or Hamiltonian
term followed by one implicit diffusion solve per axis (Lie splitting). Each
axis solve is the cyclic tridiagonal system (I - dt/s_i D2), which is
circulant and is inverted exactly in Fourier space.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .measures import (
    DEFAULT_MASS_TOL,
    WeightSequence,
    complete_positions,
    sample_df_batch,
    truncation_index,
)
from .rng import RNGStream
from .stats import estimate

TWO_PI = 2.0 * math.pi
MAX_DIM = 4
MAX_CELLS = 1 << 24


class GridBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class TensorGrid:
    d: int
    N: int
    n_g: int
    max_dim: int = MAX_DIM
    max_cells: int = MAX_CELLS

    def __post_init__(self):
        if self.d < 1 or self.N < 1:
            raise ValueError("TensorGrid needs d >= 1 and N >= 1")
        if self.n_g < 8:
            raise ValueError("TensorGrid needs n_g >= 8")
        if self.D > self.max_dim:
            raise GridBudgetError(f"grid dimension N*d = {self.D} exceeds the budget {self.max_dim}")
        if self.n_g**self.D > self.max_cells:
            raise GridBudgetError(f"n_g^D = {self.n_g ** self.D} cells exceeds the budget {self.max_cells}")

    @property
    def D(self) -> int:
        return self.N * self.d

    @property
    def h(self) -> float:
        return 1.0 / self.n_g

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_g,) * self.D

    def axis(self, particle: int, coord: int = 0) -> int:
        return particle * self.d + coord

    def nodes(self) -> np.ndarray:
        return np.arange(self.n_g) / self.n_g

    def points(self) -> np.ndarray:
        """All grid points as (n_g, ..., n_g, N, d)."""
        mesh = np.meshgrid(*([self.nodes()] * self.D), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(self.shape + (self.N, self.d))

    def descriptor(self) -> dict:
        return {"d": self.d, "N": self.N, "n_g": self.n_g}


@dataclass
class GridFunction:
    values: np.ndarray
    grid: TensorGrid
    time: float = 0.0

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError("GridFunction values do not match the grid shape")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("GridFunction has non-finite values")


def grid_data(fn, weights: WeightSequence, grid: TensorGrid) -> np.ndarray:
    """Evaluate a measure functional on em^N(s, x) at every grid point."""
    pts = grid.points()
    atoms = complete_positions(pts, len(weights) - grid.N)
    return np.asarray(fn.values(np.asarray(weights.weights), atoms), dtype=float).reshape(grid.shape)


@dataclass
class FiberProblem:
    weights: WeightSequence
    N: int
    terminal: object  # measure functional evaluated through em^N
    T: float
    t0: float = 0.0
    drift: object | None = None
    source: object | None = None
    hamiltonian: object | None = None

    def __post_init__(self):
        if not 1 <= self.N <= len(self.weights):
            raise ValueError("FiberProblem: N must be between 1 and the number of stored weights")
        if self.drift is not None and self.hamiltonian is not None:
            raise ValueError("FiberProblem: give either a drift (linear mode) or a Hamiltonian (HJB mode)")
        if not self.t0 < self.T:
            raise ValueError("FiberProblem: need t0 < T")

    @property
    def s(self) -> np.ndarray:
        return np.asarray(self.weights.weights[: self.N], dtype=float)

    @property
    def mode(self) -> str:
        if self.hamiltonian is not None:
            return "hjb"
        return "linear" if self.drift is not None else "heat"


@dataclass
class Solution:
    grid: TensorGrid
    times: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dt: float = 0.0
    steps: int = 0
    terminal_min: float = 0.0
    terminal_max: float = 0.0
    max_principle_violation: float = 0.0

    def at(self, t: float) -> np.ndarray:
        j = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.values[j]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    def grid_function(self, j: int = 0) -> GridFunction:
        return GridFunction(self.values[j], self.grid, self.times[j])


# ---- stencils


def diffusion_symbol(n_g: int, coef: float) -> np.ndarray:
    """Fourier symbol of I - coef * D2 on a periodic axis of n_g points (rfft layout)."""
    m = np.arange(n_g // 2 + 1)
    return 1.0 + coef * (4.0 * n_g**2) * np.sin(math.pi * m / n_g) ** 2


def implicit_axis_solve(values: np.ndarray, axis: int, coef: float) -> np.ndarray:
    n = values.shape[axis]
    symbol = diffusion_symbol(n, coef)
    shape = [1] * values.ndim
    shape[axis] = symbol.size
    spec = np.fft.rfft(values, axis=axis) / symbol.reshape(shape)
    return np.fft.irfft(spec, n=n, axis=axis)


def central_gradient(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)


def extract_gradient(h: np.ndarray | GridFunction, grid: TensorGrid, block: int) -> np.ndarray:
    """Central-difference gradient along the d axes of particle ``block`` (0-based), shape grid + (d,)."""
    if isinstance(h, GridFunction):
        h = h.values
    if not 0 <= block < grid.N:
        raise IndexError(f"particle block {block} out of range for N = {grid.N}")
    return np.stack([central_gradient(h, grid.axis(block, c), grid.h) for c in range(grid.d)], axis=-1)


def upwind_transport(values: np.ndarray, b: np.ndarray, grid: TensorGrid) -> np.ndarray:
    """sum over axes of b . grad h, one-sided toward the direction the backward flow reads from."""
    out = np.zeros_like(values)
    for i in range(grid.N):
        for c in range(grid.d):
            ax = grid.axis(i, c)
            fwd = (np.roll(values, -1, axis=ax) - values) / grid.h
            bwd = (values - np.roll(values, 1, axis=ax)) / grid.h
            bic = b[..., i, c]
            out += np.where(bic > 0, bic * fwd, bic * bwd)
    return out


def central_transport(values: np.ndarray, b: np.ndarray, grid: TensorGrid) -> np.ndarray:
    out = np.zeros_like(values)
    for i in range(grid.N):
        for c in range(grid.d):
            out += b[..., i, c] * central_gradient(values, grid.axis(i, c), grid.h)
    return out


# ---- solvers


def _keep(step: int, steps: int, stride: int) -> bool:
    return step == steps or (stride > 0 and step % stride == 0)


def _diffuse(values: np.ndarray, s: np.ndarray, grid: TensorGrid, dt: float) -> np.ndarray:
    for i in range(grid.N):
        for c in range(grid.d):
            values = implicit_axis_solve(values, grid.axis(i, c), dt / s[i])
    return values


def _n_steps(p: FiberProblem, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = (p.T - p.t0) / dt
    n = int(round(steps))
    if n < 1 or abs(steps - n) > 1e-6 * max(1.0, steps):
        raise ValueError("dt must divide T - t0")
    return n


def cfl_limit(grid: TensorGrid, bound: float) -> float:
    """Largest dt for which explicit upwind transport is monotone: dt * sum_axes |b| <= h_g."""
    if bound <= 0:
        return math.inf
    return grid.h / (grid.N * math.sqrt(grid.d) * bound)


def _solve(p: FiberProblem, grid: TensorGrid, dt: float, stride: int, explicit: Callable | None) -> Solution:
    steps = _n_steps(p, dt)
    s = p.s
    h = grid_data(p.terminal, p.weights, grid)
    sol = Solution(grid, dt=dt, steps=steps, terminal_min=float(h.min()), terminal_max=float(h.max()))
    slices = [(p.T, h)]
    scale = max(1.0, float(np.max(np.abs(h))))
    for n in range(1, steps + 1):
        t_next = p.T - (n - 1) * dt
        rhs = h if explicit is None else h + dt * explicit(t_next, h)
        h = _diffuse(rhs, s, grid, dt)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"solver produced non-finite values at step {n}")
        if p.mode != "hjb" and p.source is None:
            over = max(float(h.max()) - sol.terminal_max, sol.terminal_min - float(h.min()), 0.0)
            sol.max_principle_violation = max(sol.max_principle_violation, over / scale)
        if _keep(n, steps, stride):
            slices.append((p.T - n * dt, h))
    slices.reverse()
    sol.times = [t for t, _ in slices]
    sol.values = [v for _, v in slices]
    return sol


def solve_linear_backward(p: FiberProblem, grid: TensorGrid, dt: float, stride: int = 0,
                          scheme: str = "upwind") -> Solution:
    """Heat or linear mode. Slices at every ``stride`` steps (0: only t0 and T)."""
    if p.mode == "hjb":
        raise ValueError("solve_linear_backward: problem is in HJB mode")
    if grid.N != p.N:
        raise ValueError("grid and problem disagree on N")
    if p.source is not None:
        src = grid_data(p.source, p.weights, grid)
    explicit: Callable | None = None
    if p.drift is not None:
        drift = p.drift
        if p.N < len(p.weights) and drift.compat_eps <= p.weights.weights[p.N]:
            raise ValueError("drift reads atoms outside the retained particles")
        if scheme == "upwind" and dt > cfl_limit(grid, drift.bound) * (1 + 1e-12):
            raise ValueError(f"dt = {dt} violates the upwind CFL bound {cfl_limit(grid, drift.bound):.3e}")
        pts = grid.points()
        atoms = complete_positions(pts, len(p.weights) - grid.N)
        masses = np.asarray(p.weights.weights)
        transport = upwind_transport if scheme == "upwind" else central_transport
        cache = {}

        def transport_term(t, h):
            if getattr(drift, "time_dependent", False) or "b" not in cache:
                cache["b"] = drift(t, masses, atoms.reshape((-1,) + atoms.shape[-2:]),
                                   pts.reshape((-1, grid.N, grid.d))).reshape(pts.shape)
            out = transport(h, cache["b"], grid)
            return out + src if p.source is not None else out

        explicit = transport_term
    elif p.source is not None:
        explicit = lambda t, h: src  # noqa: E731
    return _solve(p, grid, dt, stride, explicit)


def solve_hjb(p: FiberProblem, grid: TensorGrid, dt: float, stride: int = 0,
              scheme: str = "central") -> Solution:
    """IMEX backward stepping of the fiber HJB equation.

    ``scheme`` is "central" or "lax_friedrichs" (dissipation set by the
    Hamiltonian's p-Lipschitz constant).
    """
    if p.hamiltonian is None:
        raise ValueError("solve_hjb needs a Hamiltonian")
    if grid.N != p.N:
        raise ValueError("grid and problem disagree on N")
    if scheme not in ("central", "lax_friedrichs"):
        raise ValueError(f"unknown scheme {scheme!r}")
    ham = p.hamiltonian
    s = p.s
    pts = grid.points()
    src = grid_data(p.source, p.weights, grid) if p.source is not None else 0.0
    lip = float(getattr(ham, "lipschitz_p", 0.0))

    def explicit(t, k):
        out = np.zeros_like(k)
        for i in range(grid.N):
            grad = extract_gradient(k, grid, i)
            try:
                hv = ham.value(pts[..., i, :], grad / s[i])
            except Exception as exc:
                raise FloatingPointError(f"Hamiltonian evaluation failed: {exc}") from exc
            out -= s[i] * hv
            if scheme == "lax_friedrichs":
                for c in range(grid.d):
                    ax = grid.axis(i, c)
                    lap = np.roll(k, -1, axis=ax) - 2 * k + np.roll(k, 1, axis=ax)
                    out += 0.5 * lip * lap / grid.h
        return out + src

    return _solve(p, grid, dt, stride, explicit)


# ---- oracles and interpolation


def fourier_heat_oracle(k_blocks: Sequence[Sequence[int]], s: Sequence[float], dt: float) -> float:
    """exp(-4 pi^2 sum_i |k_i|^2 dt / s_i): multiplier of prod_i cos(2 pi k_i . x_i) under sum (1/s_i) Lap_i."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if len(k_blocks) != len(s):
        raise ValueError("one wave vector per particle")
    rate = sum(float(np.dot(k, k)) / si for k, si in zip(k_blocks, s))
    return math.exp(-4.0 * math.pi**2 * rate * dt)


def interpolate(values: np.ndarray, points: np.ndarray, grid: TensorGrid) -> np.ndarray:
    """Periodic multilinear interpolation of grid values at points (P, N, d)."""
    pts = np.asarray(points, dtype=float).reshape(-1, grid.D)
    u = (pts % 1.0) * grid.n_g
    lo = np.floor(u).astype(int)
    frac = u - lo
    lo %= grid.n_g
    out = np.zeros(pts.shape[0], dtype=values.dtype)
    for corner in range(1 << grid.D):
        idx = []
        w = np.ones(pts.shape[0])
        for a in range(grid.D):
            bit = (corner >> a) & 1
            idx.append((lo[:, a] + bit) % grid.n_g)
            w = w * (frac[:, a] if bit else 1.0 - frac[:, a])
        out += w * values[tuple(idx)]
    return out


# ---- error budget


@dataclass(frozen=True)
class ErrorBudget:
    C_grid: float
    C_dt: float

    def __call__(self, h: float, dt: float, amplitude: float = 1.0) -> float:
        return amplitude * (self.C_grid * h * h + self.C_dt * dt)

    def to_dict(self) -> dict:
        return {"C_grid": self.C_grid, "C_dt": self.C_dt}


class _CosFirst:
    """cos(2 pi x^1) at particle ``block``."""

    compat_eps = 0.0

    def __init__(self, block: int):
        self.block = block

    def values(self, masses, atoms):
        return np.cos(TWO_PI * atoms[..., self.block, 0])


def heat_oracle_error(s: Sequence[float], n_g: int, dt: float, horizon: float, block: int = -1, d: int = 1) -> float:
    """Signed error of the heat solver on cos(2 pi x_block^1) against the Fourier multiplier."""
    s = np.asarray(s, dtype=float)
    N = len(s)
    block = block % N
    w = WeightSequence(s, 1.0 - s.sum()) if s.sum() < 1 else WeightSequence(s)
    grid = TensorGrid(d, N, n_g)
    p = FiberProblem(w, N, _CosFirst(block), T=horizon)
    sol = solve_linear_backward(p, grid, dt)
    exact = fourier_heat_oracle([[1] + [0] * (d - 1) if i == block else [0] * d for i in range(N)], s, horizon)
    idx = [0] * grid.D
    return float(sol.initial[tuple(idx)] - exact)


def calibrate_budget(s: Sequence[float], n_g: int, dt: float, horizon: float, safety: float = 2.0,
                     d: int = 1) -> ErrorBudget:
    """Fit error = C_grid h^2 + C_dt dt from heat-oracle runs at (n_g, dt) and (n_g, dt/2).

    The test mode sits on the lightest particle, the fastest decaying block.
    """
    e1 = heat_oracle_error(s, n_g, dt, horizon, d=d)
    e2 = heat_oracle_error(s, n_g, dt / 2, horizon, d=d)
    h = 1.0 / n_g
    c_dt = 2.0 * (e1 - e2) / dt
    c_grid = (2.0 * e2 - e1) / h**2
    return ErrorBudget(safety * abs(c_grid), safety * abs(c_dt))


# ---- aggregation over fibers


def fiber_value(g, eps: float, s: WeightSequence, x: np.ndarray, horizon: float, n_g: int, dt: float,
                drift=None, **grid_kw) -> float:
    """h^s_{t0} at the fiber point x for the problem with terminal g and N = N(eps, s)."""
    N = max(truncation_index(eps, s), 1)
    grid = TensorGrid(x.shape[-1], N, n_g, **grid_kw)
    p = FiberProblem(s, N, g, T=horizon, drift=drift)
    sol = solve_linear_backward(p, grid, dt)
    return float(interpolate(sol.initial, x[None, :N], grid)[0])


def h_norm_aggregate(g, eps: float, n_fibers: int, rng: RNGStream, horizon: float, n_g: int = 16,
                     dt: float = 1e-3, d: int = 1, drift=None, mass_tol: float = DEFAULT_MASS_TOL) -> dict:
    """Monte Carlo of |u_{t0}|_H^2 = E_DF[h^s_{t0}(x)^2] over sampled fibers."""
    batch = sample_df_batch(rng.generator(), n_fibers, d, mass_tol)
    vals, skipped = [], 0
    for j in range(n_fibers):
        mu = batch.measure(j)
        try:
            vals.append(fiber_value(g, eps, mu.weights, mu.atoms, horizon, n_g, dt, drift))
        except GridBudgetError:
            skipped += 1
    sq = estimate(np.square(vals)) if vals else None
    return {"estimate": sq.mean if sq else math.nan, "stderr": sq.stderr if sq else math.nan,
            "n": len(vals), "skipped": skipped}


def stability_ladder(g_of_eps: Callable[[float], object], eps_ladder: Sequence[float], n_fibers: int,
                     rng: RNGStream, horizon: float, n_g: int = 16, dt: float = 1e-3, d: int = 1,
                     mass_tol: float = DEFAULT_MASS_TOL) -> dict:
    """Gaps |u^{eps_i} - u^{eps_{i+1}}|_H on common fibers, with delta-method standard errors."""
    batch = sample_df_batch(rng.generator(), n_fibers, d, mass_tol)
    table = np.full((n_fibers, len(eps_ladder)), np.nan)
    skipped = 0
    fibers = []
    for j in range(n_fibers):
        mu = batch.measure(j)
        fibers.append(mu)
        try:
            for a, eps in enumerate(eps_ladder):
                table[j, a] = fiber_value(g_of_eps(eps), eps, mu.weights, mu.atoms, horizon, n_g, dt)
        except GridBudgetError:
            skipped += 1
            table[j] = np.nan
    ok = ~np.any(np.isnan(table), axis=1)
    gaps = []
    for a in range(len(eps_ladder) - 1):
        sq = (table[ok, a] - table[ok, a + 1]) ** 2
        e = estimate(sq)
        norm = math.sqrt(max(e.mean, 0.0))
        se = e.stderr / (2 * norm) if norm > 0 else e.stderr ** 0.5
        gaps.append({"eps": [eps_ladder[a], eps_ladder[a + 1]], "gap": norm, "stderr": se,
                     "gap_sq": e.mean, "gap_sq_stderr": e.stderr})
    return {"gaps": gaps, "n": int(ok.sum()), "skipped": skipped, "values": table, "fibers": fibers}


# ---- snapshots


def save_snapshot(path, h: GridFunction, meta: dict | None = None) -> None:
    """Flat binary: int64 header (d, N, n_g), float64 time, then row-major values; JSON sidecar."""
    g = h.grid
    with open(path, "wb") as fh:
        np.array([g.d, g.N, g.n_g], dtype="<i8").tofile(fh)
        np.array([h.time], dtype="<f8").tofile(fh)
        np.ascontiguousarray(h.values, dtype="<f8").tofile(fh)
    info = dict(g.descriptor(), time=h.time, dtype="float64", order="C", **(meta or {}))
    with open(str(path) + ".json", "w") as fh:
        json.dump(info, fh, indent=2)


def load_snapshot(path) -> GridFunction:
    with open(path, "rb") as fh:
        d, N, n_g = np.fromfile(fh, dtype="<i8", count=3)
        (t,) = np.fromfile(fh, dtype="<f8", count=1)
        grid = TensorGrid(int(d), int(N), int(n_g))
        vals = np.fromfile(fh, dtype="<f8").reshape(grid.shape)
    return GridFunction(vals, grid, float(t))
