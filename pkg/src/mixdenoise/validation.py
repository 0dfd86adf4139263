"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, ndim: int | None = None, shape=None) -> np.ndarray:
    """Coerce to a finite float64 ndarray, optionally checking ndim/shape."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if shape is not None:
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name: str, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    return as_float_array(x, name, ndim=2, shape=(rows, cols))


def check_prob_vector(p, name: str, tol: float = 1e-12) -> np.ndarray:
    """Validate a strictly positive probability vector summing to 1."""
    arr = as_float_array(p, name, ndim=1)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if arr.min() <= 0.0:
        raise ValueError(f"{name} must have strictly positive entries")
    if abs(arr.sum() - 1.0) > tol:
        raise ValueError(f"{name} must sum to 1 (got {arr.sum()!r})")
    return arr


def check_timestep(t: int, T: int) -> int:
    t = int(t)
    if not 1 <= t <= T:
        raise ValueError(f"timestep t={t} outside [1, {T}]")
    return t


def readonly(arr, dtype=np.float64) -> np.ndarray:
    """Return a non-writeable copy; keeps frozen dataclasses honest."""
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out
