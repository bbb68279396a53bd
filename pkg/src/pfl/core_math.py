"""Small deterministic numerics used throughout the package.

Everything is float64.  Randomness always comes from an explicit
``numpy.random.Generator`` built by :func:`make_rng`; the bit generator is
PCG64 seeded through ``SeedSequence``, and normal variates use numpy's
ziggurat sampler.  For a given numpy version a seed reproduces the same draws
on every platform.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

Rng = np.random.Generator


def make_rng(seed: int, *stream: int) -> Rng:
    """Return a PCG64 generator for a non-negative integer ``seed``.

    Extra integers select an independent stream for the same seed
    (``make_rng(7, 1)`` and ``make_rng(7, 2)`` do not overlap).
    """
    if stream:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))
    return np.random.Generator(np.random.PCG64(int(seed)))


def affine(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.ndim != 1 or x.ndim != 1:
        raise ShapeError(f"affine expects 2-D W and 1-D b, x; got {W.shape}, {b.shape}, {x.shape}")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"affine shape mismatch: W{W.shape}, b{b.shape}, x{x.shape}")
    return W @ x + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def standard_normal(rng: Rng, n: int | tuple[int, ...]) -> np.ndarray:
    """Draw i.i.d. N(0, 1) variates (ziggurat) from ``rng``."""
    shape = (n,) if np.isscalar(n) else tuple(n)
    if any(int(d) < 1 for d in shape):
        raise ValueError(f"standard_normal needs positive sizes, got {shape}")
    return rng.standard_normal(shape)


def svd_rank1(M: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Leading singular triple of ``M`` and its best rank-1 approximation.

    Returns ``(u1, s1, v1, M1)`` with ``M1 = s1 * outer(u1, v1)``.  The sign
    of the singular pair is fixed so that the largest-magnitude entry of
    ``v1`` is positive.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ShapeError(f"svd_rank1 needs a non-empty matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("svd_rank1 input contains non-finite entries")
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    u1, s1, v1 = U[:, 0].copy(), float(s[0]), Vt[0].copy()
    if v1[np.argmax(np.abs(v1))] < 0:
        u1, v1 = -u1, -v1
    return u1, s1, v1, s1 * np.outer(u1, v1)


def singular_values(M: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.svd(np.asarray(M, dtype=np.float64), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``theta``."""
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(theta)
        flat[i] = old - h
        fm = f(theta)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)
