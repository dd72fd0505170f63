"""Poisson-Dirichlet weights and Dirichlet-Ferguson random measures on T^d.

Infinite weight sequences are stored truncated, with the unassigned stick
remainder kept as an explicit ``tail``. The sampler keeps breaking until the
remainder is below ``mass_tol`` *and* not larger than any emitted weight, so
every unstored weight is at most ``tail`` and the stored weights are exactly
the largest ones of the full sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .rng import RNGStream, as_generator
from .stats import estimate, map_chunks
from .torus import torus_distance, wrap

DEFAULT_MASS_TOL = 1e-8
SUM_TOL = 1e-12


class TailError(ValueError):
    """A threshold is too small to be decided with the stored truncation."""


@dataclass(frozen=True)
class WeightSequence:
    """Strictly decreasing atom masses plus the mass of everything not stored."""

    weights: np.ndarray
    tail: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "tail", float(self.tail))
        if w.size == 0:
            raise ValueError("WeightSequence needs at least one weight")
        if np.any(w <= 0) or np.any(w > 1):
            raise ValueError("weights must lie in (0, 1]")
        if np.any(np.diff(w) >= 0):
            raise ValueError("weights must be strictly decreasing")
        if self.tail < 0:
            raise ValueError("tail mass must be nonnegative")
        if abs(math.fsum(w) + self.tail - 1.0) > SUM_TOL:
            raise ValueError(f"weights + tail must sum to 1 (got {math.fsum(w) + self.tail!r})")
        if self.tail > w[-1]:
            raise ValueError("tail mass exceeds the smallest stored weight")

    def __len__(self) -> int:
        return self.weights.size

    @property
    def threshold(self) -> float:
        """Every unstored weight is <= this value."""
        return self.tail


@dataclass
class AtomicMeasure:
    """``sum_i masses[i] * delta_{atoms[i]}`` plus an unresolved tail of mass ``tail``.

    The masses need not be ordered (perturbed measures used by the Mecke
    identity append an atom); :meth:`ordered` re-establishes the ordering.
    """

    masses: np.ndarray
    atoms: np.ndarray
    tail: float = 0.0
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        self.atoms = atoms
        self.tail = float(self.tail)
        if self.check:
            if atoms.shape[0] != self.masses.size:
                raise ValueError("one atom per mass required")
            if np.any(self.masses < 0):
                raise ValueError("negative mass")
            if abs(math.fsum(self.masses) + self.tail - 1.0) > 1e-9:
                raise ValueError("measure must have total mass 1")

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    def __len__(self) -> int:
        return self.masses.size

    def ordered(self) -> "AtomicMeasure":
        order = np.argsort(-self.masses, kind="stable")
        return AtomicMeasure(self.masses[order], self.atoms[order], self.tail, check=False)

    @property
    def weights(self) -> WeightSequence:
        m = self.ordered()
        return WeightSequence(m.masses[m.masses > 0], m.tail)

    def atoms_distinct(self) -> bool:
        if len(self) < 2:
            return True
        return np.unique(self.atoms, axis=0).shape[0] == len(self)

    def perturbed(self, x, r: float) -> "AtomicMeasure":
        """``(1 - r) mu + r delta_x``."""
        x = wrap(x).reshape(1, -1)
        return AtomicMeasure(
            np.append((1.0 - r) * self.masses, r),
            np.vstack([self.atoms, x]),
            (1.0 - r) * self.tail,
            check=False,
        )

    def to_record(self) -> dict:
        return {"weights": self.masses.tolist(), "tail": self.tail, "atoms": self.atoms.tolist()}

    @classmethod
    def from_record(cls, record: dict) -> "AtomicMeasure":
        return cls(record["weights"], record["atoms"], record.get("tail", 0.0))


def em(s: WeightSequence, x) -> AtomicMeasure:
    """em(s, x) = sum_i s_i delta_{x_i} for as many atoms as stored weights."""
    x = wrap(np.asarray(x, dtype=float).reshape(len(s), -1))
    return AtomicMeasure(s.weights, x, s.tail)


def delta_origin(d: int) -> AtomicMeasure:
    return AtomicMeasure([1.0], np.zeros((1, d)))


# ---------------------------------------------------------------- sampling


def sample_gem(rng, mass_tol: float = DEFAULT_MASS_TOL) -> tuple[np.ndarray, float]:
    """Stick-breaking weights (Y_1, Y_2(1-Y_1), ...) in draw order, and the final remainder.

    ``rng`` can be an :class:`RNGStream`, a numpy ``Generator`` or any object
    whose ``random()`` returns a float in (0, 1] (used for deterministic stubs).
    """
    if not 0.0 < mass_tol < 1.0:
        raise ValueError(f"mass_tol must lie in (0, 1), got {mass_tol}")
    if isinstance(rng, (RNGStream, np.random.Generator)) or rng is None or isinstance(rng, int):
        gen = as_generator(rng)

        def draw() -> float:
            return 1.0 - gen.random()  # uniform on (0, 1]; a zero weight is impossible

    else:
        draw = rng.random
    weights = []
    remainder = 1.0
    smallest = math.inf
    while True:
        y = float(draw())
        w = y * remainder
        remainder *= 1.0 - y
        weights.append(w)
        smallest = min(smallest, w)
        if remainder < mass_tol and remainder <= smallest:
            return np.array(weights), remainder


def reorder(raw, tail: float = 0.0) -> WeightSequence:
    """Decreasing rearrangement; ties keep their original order."""
    raw = np.asarray(raw, dtype=float).reshape(-1)
    if np.any(raw < 0):
        raise ValueError("reorder: negative weight")
    order = np.argsort(-raw, kind="stable")
    return WeightSequence(raw[order], tail)


def _uniform_atoms(gen: np.random.Generator, k: int, d: int) -> np.ndarray:
    while True:
        atoms = gen.random((k, d))
        if k < 2 or np.unique(atoms, axis=0).shape[0] == k:
            return atoms


def sample_dirichlet_ferguson(rng, mass_tol: float = DEFAULT_MASS_TOL, d: int = 1) -> AtomicMeasure:
    gen = as_generator(rng)
    raw, tail = sample_gem(gen, mass_tol)
    s = reorder(raw, tail)
    return em(s, _uniform_atoms(gen, len(s), d))


@dataclass
class MeasureBatch:
    """Padded batch of ordered atomic measures: masses (P, K), atoms (P, K, d), tails (P,).

    Padding entries have mass exactly 0.
    """

    masses: np.ndarray
    atoms: np.ndarray
    tails: np.ndarray

    def __len__(self) -> int:
        return self.masses.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[-1]

    def measure(self, i: int) -> AtomicMeasure:
        keep = self.masses[i] > 0
        return AtomicMeasure(self.masses[i, keep], self.atoms[i, keep], self.tails[i])


def sample_pd_batch(gen: np.random.Generator, n: int, mass_tol: float = DEFAULT_MASS_TOL):
    """Vectorised Poisson-Dirichlet(1) sampler with the same stopping rule as :func:`sample_gem`.

    Returns ``(masses, tails)`` with masses sorted decreasingly along axis 1
    and zero-padded.
    """
    if not 0.0 < mass_tol < 1.0:
        raise ValueError(f"mass_tol must lie in (0, 1), got {mass_tol}")
    remainder = np.ones(n)
    smallest = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    cols = []
    while active.any():
        y = 1.0 - gen.random(n)
        w = np.where(active, y * remainder, 0.0)
        remainder = np.where(active, remainder * (1.0 - y), remainder)
        smallest = np.where(active, np.minimum(smallest, w), smallest)
        cols.append(w)
        active &= ~((remainder < mass_tol) & (remainder <= smallest))
    masses = -np.sort(-np.stack(cols, axis=1), axis=1)
    return masses, remainder


def sample_df_batch(gen: np.random.Generator, n: int, d: int = 1, mass_tol: float = DEFAULT_MASS_TOL) -> MeasureBatch:
    masses, tails = sample_pd_batch(gen, n, mass_tol)
    atoms = gen.random(masses.shape + (d,))
    return MeasureBatch(masses, atoms, tails)


# -------------------------------------------------------------- truncation


def truncation_index(eps: float, s: WeightSequence) -> int:
    """N(eps, s): number of weights >= eps."""
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if s.tail > 0 and eps <= s.threshold:
        raise TailError(f"eps={eps} is not above the stored tail threshold {s.threshold}")
    return int(np.count_nonzero(s.weights >= eps))


def truncation_index_batch(eps: float, masses: np.ndarray) -> np.ndarray:
    return np.count_nonzero(np.asarray(masses) >= eps, axis=-1)


def completion_scale(x: np.ndarray) -> np.ndarray:
    """epsilon^N(x_1..x_N): 1 on the diagonal, else a third of the smallest nonzero distance to x_1.

    ``x`` has shape (..., N, d); the result has shape (...).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-2] == 1:
        return np.ones(x.shape[:-2])
    dist = torus_distance(x[..., 1:, :], x[..., :1, :])
    dist = np.asarray(dist)
    nonzero = dist > 0
    masked = np.where(nonzero, dist, np.inf)
    smallest = masked.min(axis=-1)
    return np.where(np.isfinite(smallest), smallest / 3.0, 1.0)


def complete_positions(x, tail_count: int) -> np.ndarray:
    """The completion map P_N: keep x_1..x_N, append z_j = x_1 + 2^-j eps^N e_1 for j = N+1..N+tail_count.

    Accepts x of shape (N, d) or batched (..., N, d).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    n = x.shape[-2]
    if n < 1:
        raise ValueError("complete_positions needs N >= 1")
    if tail_count <= 0:
        return x.copy()
    scale = completion_scale(x)[..., None, None]
    j = np.arange(n + 1, n + tail_count + 1, dtype=float)
    shift = np.zeros((tail_count, x.shape[-1]))
    shift[:, 0] = 2.0**-j
    extra = wrap(x[..., :1, :] + shift * scale)
    return np.concatenate([x, extra], axis=-2)


def em_N(s: WeightSequence, x) -> AtomicMeasure:
    """em^N(s, x) = em(s, P_N(x))."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    n = x.shape[0]
    if n > len(s):
        raise ValueError(f"em_N: N={n} exceeds the {len(s)} stored weights")
    return AtomicMeasure(s.weights, complete_positions(x, len(s) - n), s.tail)


def conditional_truncate(mu: AtomicMeasure, eps: float) -> AtomicMeasure:
    """T_eps: condition mu on its atoms of mass > eps; delta at the origin if there are none."""
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if mu.tail > 0 and eps < mu.tail:
        raise TailError(f"eps={eps} is below the unresolved tail mass {mu.tail}")
    keep = mu.masses > eps
    total = math.fsum(mu.masses[keep])
    if total <= 0:
        return delta_origin(mu.d)
    return AtomicMeasure(mu.masses[keep] / total, mu.atoms[keep], 0.0)


def total_variation(mu: AtomicMeasure, nu: AtomicMeasure) -> float:
    """Exact total variation norm sum_x |mu_x - nu_x| (tails sit on their own distinct atoms)."""
    atoms = np.vstack([mu.atoms, nu.atoms])
    keys, inverse = np.unique(atoms, axis=0, return_inverse=True)
    signed = np.zeros(keys.shape[0])
    np.add.at(signed, inverse.reshape(-1), np.concatenate([mu.masses, -nu.masses]))
    return math.fsum(np.abs(signed)) + mu.tail + nu.tail


def tv_tail_bound(mu: AtomicMeasure, eps: float) -> float:
    """4 x (mass outside the atoms kept by T_eps); dominates total_variation(T_eps(mu), mu)."""
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    kept = math.fsum(mu.masses[mu.masses > eps])
    return 4.0 * max(1.0 - kept, 0.0)


def eps_compatible(mu: AtomicMeasure, nu: AtomicMeasure, eps: float, atol: float = 0.0) -> bool:
    """mu and nu share the same atoms of mass >= eps with the same masses."""

    def heavy(m):
        keep = m.masses >= eps
        order = np.lexsort(m.atoms[keep].T[::-1])
        return m.masses[keep][order], m.atoms[keep][order]

    a_m, a_x = heavy(mu)
    b_m, b_x = heavy(nu)
    return a_m.shape == b_m.shape and np.allclose(a_m, b_m, atol=atol, rtol=0) and np.allclose(a_x, b_x, atol=atol, rtol=0)


class Pick(NamedTuple):
    index: int  # 1-based
    mass: float


def size_biased_pick(rng, s: WeightSequence) -> Pick:
    """Index i with probability s_i.

    When the uniform falls in the tail, the stick is broken further on demand;
    the returned index then counts the extension pieces in stick order after
    the stored weights.
    """
    gen = as_generator(rng)
    u = gen.random()
    cum = np.cumsum(s.weights)
    if u < cum[-1]:
        i = int(np.searchsorted(cum, u, side="right"))
        return Pick(i + 1, float(s.weights[i]))
    u -= cum[-1]
    remainder = s.tail
    index = len(s)
    while remainder > 0:
        index += 1
        w = (1.0 - gen.random()) * remainder
        if u < w:
            return Pick(index, w)
        u -= w
        remainder -= w
    return Pick(index, float(s.weights[-1]))  # u landed on rounding slack


def size_biased_masses(gen: np.random.Generator, masses: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """Mass of a size-biased pick for every row of a padded batch."""
    u = gen.random(masses.shape[0])
    cum = np.cumsum(masses, axis=1)
    idx = (cum <= u[:, None]).sum(axis=1)
    out = np.empty(masses.shape[0])
    inside = idx < masses.shape[1]
    inside[inside] &= masses[inside, idx[inside]] > 0
    out[inside] = masses[inside, idx[inside]]
    for row in np.flatnonzero(~inside):
        k = int(np.count_nonzero(masses[row]))
        s = WeightSequence(masses[row, :k], tails[row])
        out[row] = size_biased_pick(gen, s).mass
    return out


# ------------------------------------------------------------------ Mecke

MeckeFunctional = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
"""u(masses (P,K), atoms (P,K,d), x (P,d), r (P,)) -> (P,), vectorised over the batch."""


def _mecke_chunk(u: MeckeFunctional, d: int, mass_tol: float):
    def run(stream: RNGStream, size: int) -> np.ndarray:
        gen = stream.generator()
        batch = sample_df_batch(gen, size, d, mass_tol)
        m, a = batch.masses, batch.atoms
        lhs = np.zeros(size)
        for i in range(m.shape[1]):
            present = m[:, i] > 0
            val = u(m, a, a[:, i, :], m[:, i])
            lhs += np.where(present, m[:, i] * val, 0.0)
        x = gen.random((size, d))
        r = gen.random(size)
        pm = np.concatenate([(1.0 - r)[:, None] * m, r[:, None]], axis=1)
        pa = np.concatenate([a, x[:, None, :]], axis=1)
        rhs = u(pm, pa, x, r)
        return np.stack([lhs, rhs], axis=1)

    return run


def mecke_test(
    u: MeckeFunctional,
    n_samples: int,
    rng: RNGStream,
    d: int = 1,
    mass_tol: float = DEFAULT_MASS_TOL,
    bound: float | None = None,
    workers: int = 1,
) -> dict:
    """Monte Carlo estimates of both sides of the Mecke identity for the Dirichlet-Ferguson law.

    lhs = E int u(mu, x, mu_x) dmu(x); rhs = E int int u((1-r)mu + r delta_x, x, r) dr dx.
    """
    if n_samples < 100:
        raise ValueError("mecke_test needs n_samples >= 100")
    vals = map_chunks(_mecke_chunk(u, d, mass_tol), n_samples, rng, workers=workers)
    if bound is not None and np.max(np.abs(vals[:, 1])) > bound * (1 + 1e-12):
        raise ValueError("test functional exceeded its declared bound")
    lhs, rhs = estimate(vals[:, 0]), estimate(vals[:, 1])
    return {
        "lhs": lhs.mean,
        "rhs": rhs.mean,
        "stderr_lhs": lhs.stderr,
        "stderr_rhs": rhs.stderr,
        "n": n_samples,
    }


def _u_cos(m, a, x, r):
    return np.cos(2 * np.pi * x[:, 0])


def _u_mass(m, a, x, r):
    return np.asarray(r, dtype=float)


def _u_mass_correlation(m, a, x, r):
    corr = np.sum(m * np.cos(2 * np.pi * (a[..., 0] - x[:, None, 0])), axis=1)
    return r * corr


def mecke_battery() -> list[tuple[str, MeckeFunctional, float, float]]:
    """(name, u, bound, exact common value of both sides)."""
    return [
        ("cos(2 pi x1)", _u_cos, 1.0, 0.0),
        ("r", _u_mass, 1.0, 0.5),
        ("r * int cos(2 pi (y1 - x1)) dmu(y)", _u_mass_correlation, 1.0, 1.0 / 3.0),
    ]
