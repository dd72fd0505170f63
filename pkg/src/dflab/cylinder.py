"""Cylinder functions u = F(f_1*(mu), ..., f_k*(mu)) with f*(mu) = int f(mu_x, x) dmu(x).

Inner functions come from a closed-form family

    f(r, x) = amplitude * chi(r) * r**power * cos(2 pi k.x + phase)

where ``chi`` is a mass cutoff vanishing below ``eps``: a C-infinity
transition on [eps, 2 eps] (``"smooth"``), a hard indicator of r >= eps
(``"step"``) or the constant 1 (``"none"``). Outer functions carry their
gradient and Hessian. Everything here is vectorised over padded measure
batches: masses (..., K), atoms (..., K, d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .measures import (
    DEFAULT_MASS_TOL,
    AtomicMeasure,
    TailError,
    sample_df_batch,
)
from .rng import RNGStream
from .stats import estimate, map_chunks

TWO_PI = 2.0 * math.pi


def _psi(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_cutoff(r, eps: float) -> np.ndarray:
    """C-infinity step: 0 for r < eps, 1 for r >= 2 eps."""
    r = np.asarray(r, dtype=float)
    if eps <= 0:
        return np.ones_like(r)
    t = (r - eps) / eps
    a = _psi(t)
    b = _psi(1.0 - t)
    with np.errstate(invalid="ignore"):
        out = a / (a + b)
    return np.where(t <= 0, 0.0, np.where(t >= 1, 1.0, out))


class MeasureFunctional(Protocol):
    """A functional of measures depending only on atoms of mass >= compat_eps."""

    compat_eps: float

    def values(self, masses: np.ndarray, atoms: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class InnerFunction:
    k: tuple[int, ...] = (0,)
    amplitude: float = 1.0
    phase: float = 0.0
    cutoff: str = "smooth"
    eps: float = 0.0
    power: int = 0

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(v) for v in np.atleast_1d(self.k)))
        if self.cutoff not in ("smooth", "step", "none"):
            raise ValueError(f"unknown cutoff {self.cutoff!r}")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if self.cutoff == "none" and self.eps != 0.0:
            raise ValueError("cutoff 'none' requires eps = 0")
        if self.power < 0:
            raise ValueError("power must be nonnegative")

    @property
    def support_threshold(self) -> float:
        return 0.0 if self.cutoff == "none" else self.eps

    @property
    def d(self) -> int:
        return len(self.k)

    def mass_factor(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.cutoff == "smooth":
            chi = smooth_cutoff(r, self.eps)
        elif self.cutoff == "step":
            chi = (r >= self.eps).astype(float)
        else:
            chi = np.ones_like(r)
        return self.amplitude * chi * r**self.power if self.power else self.amplitude * chi

    def _angle(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"inner function is {self.d}-dimensional, got points of dimension {x.shape[-1]}")
        return TWO_PI * (x @ np.asarray(self.k, dtype=float)) + self.phase

    def eval(self, r, x) -> np.ndarray:
        return self.mass_factor(r) * np.cos(self._angle(x))

    def grad_x(self, r, x) -> np.ndarray:
        k = TWO_PI * np.asarray(self.k, dtype=float)
        return -(self.mass_factor(r) * np.sin(self._angle(x)))[..., None] * k

    def lap_x(self, r, x) -> np.ndarray:
        k2 = TWO_PI**2 * float(np.dot(self.k, self.k))
        return -k2 * self.mass_factor(r) * np.cos(self._angle(x))

    def descriptor(self) -> dict:
        return {
            "k": list(self.k),
            "amplitude": self.amplitude,
            "phase": self.phase,
            "cutoff": self.cutoff,
            "eps": self.eps,
            "power": self.power,
        }


class OuterFunction:
    arity: int

    def value(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Quadratic(OuterFunction):
    """F(y) = c + b.y + y.A.y / 2 (A symmetric)."""

    b: tuple[float, ...]
    A: tuple[tuple[float, ...], ...] | None = None
    c: float = 0.0

    def __post_init__(self):
        b = tuple(float(v) for v in np.atleast_1d(self.b))
        object.__setattr__(self, "b", b)
        k = len(b)
        A = np.zeros((k, k)) if self.A is None else np.asarray(self.A, dtype=float).reshape(k, k)
        if not np.allclose(A, A.T):
            raise ValueError("Quadratic: A must be symmetric")
        object.__setattr__(self, "A", tuple(map(tuple, A)))

    @property
    def arity(self) -> int:
        return len(self.b)

    def value(self, y):
        A = np.asarray(self.A)
        return self.c + y @ np.asarray(self.b) + 0.5 * np.einsum("...i,ij,...j->...", y, A, y)

    def grad(self, y):
        return np.asarray(self.b) + y @ np.asarray(self.A)

    def hess(self, y):
        return np.broadcast_to(np.asarray(self.A), y.shape + (y.shape[-1],))

    def descriptor(self) -> dict:
        return {"name": "quadratic", "b": list(self.b), "A": [list(r) for r in self.A], "c": self.c}


def identity(k: int = 1, index: int = 0) -> Quadratic:
    b = [0.0] * k
    b[index] = 1.0
    return Quadratic(tuple(b))


def constant(c: float, k: int = 1) -> Quadratic:
    return Quadratic((0.0,) * k, c=c)


def square(k: int = 1) -> Quadratic:
    """F(y) = |y|^2."""
    return Quadratic((0.0,) * k, A=tuple(map(tuple, 2.0 * np.eye(k))))


@dataclass(frozen=True)
class Cosine(OuterFunction):
    """F(y) = amplitude * cos(w.y + phase); bounded with bounded derivatives."""

    w: tuple[float, ...]
    amplitude: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(v) for v in np.atleast_1d(self.w)))

    @property
    def arity(self) -> int:
        return len(self.w)

    def value(self, y):
        return self.amplitude * np.cos(y @ np.asarray(self.w) + self.phase)

    def grad(self, y):
        w = np.asarray(self.w)
        return (-self.amplitude * np.sin(y @ w + self.phase))[..., None] * w

    def hess(self, y):
        w = np.asarray(self.w)
        return (-self.amplitude * np.cos(y @ w + self.phase))[..., None, None] * np.outer(w, w)

    def descriptor(self) -> dict:
        return {"name": "cosine", "w": list(self.w), "amplitude": self.amplitude, "phase": self.phase}


def _check_tail(threshold: float, tails) -> None:
    tail = float(np.max(tails)) if np.size(tails) else 0.0
    if tail > 0 and threshold <= tail:
        raise TailError(f"support threshold {threshold} does not exceed the unresolved tail mass {tail}")


@dataclass(frozen=True)
class CylinderFunction:
    outer: OuterFunction
    inners: tuple[InnerFunction, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        inners = tuple(self.inners)
        object.__setattr__(self, "inners", inners)
        if not inners:
            raise ValueError("a cylinder function needs k >= 1 inner functions")
        if self.outer.arity != len(inners):
            raise ValueError(f"outer arity {self.outer.arity} != {len(inners)} inner functions")
        if len({f.d for f in inners}) != 1:
            raise ValueError("inner functions disagree on the torus dimension")

    @property
    def threshold(self) -> float:
        return min(f.support_threshold for f in self.inners)

    @property
    def compat_eps(self) -> float:
        return self.threshold

    @property
    def d(self) -> int:
        return self.inners[0].d

    # ---- batched kernels: masses (..., K), atoms (..., K, d)

    def inner_values(self, masses, atoms) -> np.ndarray:
        masses = np.asarray(masses, dtype=float)
        return np.stack([np.sum(masses * f.eval(masses, atoms), axis=-1) for f in self.inners], axis=-1)

    def values(self, masses, atoms) -> np.ndarray:
        return self.outer.value(self.inner_values(masses, atoms))

    def gradients(self, masses, atoms) -> np.ndarray:
        """Intrinsic gradient at every atom, shape (..., K, d)."""
        dF = self.outer.grad(self.inner_values(masses, atoms))
        out = 0.0
        for l, f in enumerate(self.inners):
            out = out + dF[..., l, None, None] * f.grad_x(masses, atoms)
        return np.broadcast_to(out, np.shape(atoms)).copy()

    def generator_values(self, masses, atoms) -> np.ndarray:
        if self.threshold <= 0:
            raise ValueError("the generator is only defined for inner functions supported away from r = 0")
        masses = np.asarray(masses, dtype=float)
        y = self.inner_values(masses, atoms)
        dF = self.outer.grad(y)
        d2F = self.outer.hess(y)
        grads = [f.grad_x(masses, atoms) for f in self.inners]
        total = 0.0
        for l, f in enumerate(self.inners):
            total = total + dF[..., l, None] * f.lap_x(masses, atoms)
            for m in range(len(self.inners)):
                dot = np.sum(grads[l] * grads[m], axis=-1)
                total = total + masses * d2F[..., l, m, None] * dot
        return np.sum(total, axis=-1)

    def pre_cheeger_values(self, masses, atoms) -> np.ndarray:
        g = self.gradients(masses, atoms)
        return np.sum(np.asarray(masses) * np.sum(g * g, axis=-1), axis=-1)

    def descriptor(self) -> dict:
        return {"outer": self.outer.descriptor(), "inners": [f.descriptor() for f in self.inners]}


def cylinder(outer: OuterFunction, *inners: InnerFunction, name: str = "") -> CylinderFunction:
    return CylinderFunction(outer, tuple(inners), name)


# ---- single-measure operations


def hat_star(f: InnerFunction, mu: AtomicMeasure) -> float:
    _check_tail(f.support_threshold, mu.tail)
    return float(np.sum(mu.masses * f.eval(mu.masses, mu.atoms)))


def evaluate(u: CylinderFunction, mu: AtomicMeasure) -> float:
    _check_tail(u.threshold, mu.tail)
    return float(u.values(mu.masses, mu.atoms))


def intrinsic_gradient(u: CylinderFunction, mu: AtomicMeasure, atom_index: int) -> np.ndarray:
    """(Du)_mu at atom ``atom_index`` (0-based)."""
    if not 0 <= atom_index < len(mu):
        raise IndexError(f"atom index {atom_index} out of range for {len(mu)} atoms")
    _check_tail(u.threshold, mu.tail)
    return u.gradients(mu.masses, mu.atoms)[atom_index]


def generator_Lc(u: CylinderFunction, mu: AtomicMeasure) -> float:
    if u.threshold <= 0:
        raise ValueError("generator_Lc requires a positive support threshold")
    _check_tail(u.threshold, mu.tail)
    return float(u.generator_values(mu.masses, mu.atoms))


def pre_cheeger(u: CylinderFunction, mu: AtomicMeasure) -> float:
    _check_tail(u.threshold, mu.tail)
    return float(u.pre_cheeger_values(mu.masses, mu.atoms))


# ---- Monte Carlo quadrature of the Dirichlet form


def _form_chunk(u, v, d, mass_tol, with_generator):
    def run(stream: RNGStream, size: int) -> np.ndarray:
        batch = sample_df_batch(stream.generator(), size, d, mass_tol)
        _check_tail(min(u.threshold, v.threshold), batch.tails)
        m, a = batch.masses, batch.atoms
        energy = np.sum(m * np.sum(u.gradients(m, a) * v.gradients(m, a), axis=-1), axis=-1)
        if not with_generator:
            return energy[:, None]
        return np.stack([energy, u.values(m, a) * v.generator_values(m, a)], axis=1)

    return run


def dirichlet_form_mc(
    u: CylinderFunction,
    v: CylinderFunction,
    n: int,
    rng: RNGStream,
    d: int = 1,
    mass_tol: float = DEFAULT_MASS_TOL,
    workers: int = 1,
) -> dict:
    """E over the Dirichlet-Ferguson law of sum_i s_i (Du)(x_i).(Dv)(x_i)."""
    if n < 100:
        raise ValueError("dirichlet_form_mc needs n >= 100")
    vals = map_chunks(_form_chunk(u, v, d, mass_tol, False), n, rng, workers=workers)
    est = estimate(vals[:, 0])
    return {"estimate": est.mean, "stderr": est.stderr, "n": n}


def ibp_residual(
    u: CylinderFunction,
    v: CylinderFunction,
    n: int,
    rng: RNGStream,
    d: int = 1,
    mass_tol: float = DEFAULT_MASS_TOL,
    workers: int = 1,
) -> dict:
    """E(u, v) + E[u L_c v], both averaged over the same draws.

    ``combined_stderr`` is the standard error of the paired per-sample sum.
    """
    if v.threshold <= 0:
        raise ValueError("ibp_residual: v must have a positive support threshold")
    if n < 100:
        raise ValueError("ibp_residual needs n >= 100")
    vals = map_chunks(_form_chunk(u, v, d, mass_tol, True), n, rng, workers=workers)
    energy = estimate(vals[:, 0])
    cross = estimate(vals[:, 1])
    resid = estimate(vals[:, 0] + vals[:, 1])
    return {
        "residual": resid.mean,
        "combined_stderr": resid.stderr,
        "energy": energy.mean,
        "energy_stderr": energy.stderr,
        "u_Lc_v": cross.mean,
        "u_Lc_v_stderr": cross.stderr,
        "n": n,
    }


@dataclass(frozen=True)
class TruncatedFunctional:
    """g(T_eps(mu)): ``base`` evaluated on mu conditioned to its atoms of mass > eps.

    ``base`` must accept unnormalised padded batches (masses may contain zeros).
    """

    base: MeasureFunctional
    eps: float

    @property
    def compat_eps(self) -> float:
        return self.eps

    def values(self, masses, atoms) -> np.ndarray:
        masses = np.asarray(masses, dtype=float)
        atoms = np.asarray(atoms, dtype=float)
        kept = np.where(masses > self.eps, masses, 0.0)
        total = kept.sum(axis=-1, keepdims=True)
        empty = total[..., 0] <= 0
        norm = np.where(total > 0, kept / np.where(total > 0, total, 1.0), 0.0)
        if np.any(empty):
            # delta at the origin
            norm = norm.copy()
            atoms = atoms.copy()
            norm[empty, ..., 0] = 1.0
            atoms[empty, ..., 0, :] = 0.0
        return self.base.values(norm, atoms)


def fourier_energy(d: int = 1, k: Sequence[int] | None = None) -> CylinderFunction:
    """|int exp(2 pi i k.x) dmu(x)|^2, weakly continuous in mu."""
    k = tuple(k) if k is not None else (1,) + (0,) * (d - 1)
    return cylinder(
        square(2),
        InnerFunction(k=k, cutoff="none"),
        InnerFunction(k=k, cutoff="none", phase=-math.pi / 2),
        name="fourier_energy",
    )
