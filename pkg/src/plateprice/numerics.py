"""Seeded random streams, small matrix helpers and gradient-checking utilities."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; identical seeds give identical streams on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def clip_global_norm(grads, threshold: float, names: Sequence[str] | None = None):
    """Rescale ``grads`` jointly so their combined L2 norm is at most ``threshold``.

    Returns ``(clipped, scale)``. Inputs are never modified; when no clipping is
    needed the original arrays are returned with ``scale == 1.0``.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    grads = list(grads)
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"block {i}"
            raise NonFiniteError(f"non-finite gradient in {label}")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads, 1.0
    scale = threshold / norm
    return [g * scale for g in grads], scale


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
