"""Flat torus T^d = R^d / Z^d.

Points are stored as their representative in [0, 1)^d. Particle paths are
kept in the lifted space R^d and only wrapped when observed.
"""
from __future__ import annotations

import math

import numpy as np


def _as_coords(y) -> np.ndarray:
    arr = np.asarray(y, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def wrap(y) -> np.ndarray:
    """Canonical projection R^d -> [0,1)^d, componentwise ``y mod 1``.

    Works on any array shape; the last axis is the torus coordinate axis.
    """
    arr = _as_coords(y)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap: non-finite coordinate")
    out = arr - np.floor(arr)
    # y = -1e-17 gives 1.0 after subtraction
    out[out >= 1.0] = 0.0
    return out


def embed(x) -> np.ndarray:
    """Embedding T^d -> R^d (the [0,1)^d representative)."""
    return wrap(x)


def wrapped_difference(a, b) -> np.ndarray:
    """Componentwise shortest signed difference ``a - b`` in [-1/2, 1/2)."""
    diff = _as_coords(a) - _as_coords(b)
    return diff - np.floor(diff + 0.5)


def torus_distance(a, b) -> float | np.ndarray:
    a = _as_coords(a)
    b = _as_coords(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"torus_distance: dimension mismatch {a.shape[-1]} != {b.shape[-1]}")
    dist = np.sqrt(np.sum(wrapped_difference(a, b) ** 2, axis=-1))
    return float(dist) if np.ndim(dist) == 0 else dist


def fourier_eigenvalue(k) -> float:
    """Eigenvalue factor 4 pi^2 |k|^2 of -Delta on the plane wave exp(2 pi i k.x)."""
    k = np.asarray(k, dtype=int)
    return 4.0 * math.pi**2 * float(np.sum(k * k))


def plane_wave(k, x, phase: float = 0.0) -> np.ndarray:
    """cos(2 pi k.x + phase) for x of shape (..., d)."""
    k = np.asarray(k, dtype=float)
    return np.cos(2.0 * math.pi * (np.asarray(x, dtype=float) @ k) + phase)
