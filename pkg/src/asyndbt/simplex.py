"""Probability-simplex geometry shared by every solver component."""
from __future__ import annotations

import numpy as np

from . import _kernels

SUM_TOL = 1e-9
ROOT_TOL = 1e-10
ON_SIMPLEX_TOL = 1e-12


class SimplexError(ValueError):
    """Raised for inputs that cannot be projected or are not distributions."""


def _as_finite(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise SimplexError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(arr)):
        raise SimplexError(f"{name} contains non-finite entries")
    return arr


def threshold_residual(x, v):
    """s(v) = 1^T min(1, max(0, x - v)) - 1 for a single vector."""
    return float(np.clip(np.asarray(x, dtype=np.float64) - v, 0.0, 1.0).sum() - 1.0)


def project_to_simplex(x, return_threshold=False):
    """Euclidean projection onto ``{y : 0 <= y <= 1, sum(y) = 1}``.

    Accepts a vector or a 2-D array (rows projected independently).  The
    threshold ``v*`` solving ``s(v*) = 0`` is found by an exact sweep over the
    two-sided breakpoints ``x_i - 1`` and ``x_i``.

    Parameters
    ----------
    x : array_like
        Finite input, shape ``(n,)`` or ``(m, n)``.
    return_threshold : bool
        Also return ``v*`` (scalar or per-row array).
    """
    arr = _as_finite(x)
    if arr.ndim == 1:
        out, v = _kernels.project_rows(arr[None, :].copy())
        out, v = out[0], float(v[0])
    elif arr.ndim == 2:
        out, v = _kernels.project_rows(np.ascontiguousarray(arr))
    else:
        raise SimplexError("expected a vector or a 2-D array of row vectors")
    # points already on the simplex are returned bit-for-bit, so projection is exactly idempotent
    on = (np.abs(arr.sum(axis=-1) - 1.0) <= ON_SIMPLEX_TOL) & np.all((arr >= 0.0) & (arr <= 1.0), axis=-1)
    if np.any(on):
        out = np.where(on[..., None], arr, out)
        v = np.where(on, 0.0, v)
        if arr.ndim == 1:
            v = float(v)
    resid = np.abs(out.sum(axis=-1) - 1.0)
    if np.any(resid > ROOT_TOL):
        raise SimplexError(f"threshold search failed, |s(v*)| = {float(np.max(resid)):.3e}")
    if return_threshold:
        return out, v
    return out


def is_prob_vector(p, tol=SUM_TOL):
    arr = np.asarray(p, dtype=np.float64)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        return False
    if np.any(arr < -tol) or np.any(arr > 1.0 + tol):
        return False
    return bool(np.all(np.abs(arr.sum(axis=-1) - 1.0) <= tol))


def check_prob_vector(p, name="p"):
    if not is_prob_vector(p):
        raise SimplexError(f"{name} is not a valid probability vector")
    return np.asarray(p, dtype=np.float64)


def sample_categorical(p, rng):
    """Draw one index from ``Cat(p)`` by inverse CDF over storage order."""
    p = check_prob_vector(p)
    cdf = np.cumsum(p)[None, :]
    u = rng.random((1, 1))
    return int(_kernels.sample_cdf(cdf, u)[0, 0])


def sample_rows(probs, n_samples, rng):
    """Draw ``n_samples`` independent index tuples, one index per row of ``probs``.

    Returns an ``(n_samples, rows)`` int array.  One uniform is consumed per
    (sample, row) in row-major order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    rows = probs.shape[0]
    if rows == 0:
        return np.zeros((n_samples, 0), dtype=np.int64)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((n_samples, rows))
    return _kernels.sample_cdf(cdf, u)


def l1_distance(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(np.abs(x - y).sum())


def sign_subgradient(x):
    """Componentwise sign with sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("sign_subgradient requires finite input")
    return np.sign(x)


def project_dual(lam, lam_max):
    if not lam_max > 0:
        raise ValueError("lam_max must be positive")
    return np.clip(lam, 0.0, lam_max)


def uniform(n, rows=None):
    if rows is None:
        return np.full(n, 1.0 / n)
    return np.full((rows, n), 1.0 / n)


def sanitize(x):
    """Clamp an arbitrary (possibly non-finite) vector entrywise into [0, 1]."""
    x = np.nan_to_num(np.asarray(x, dtype=np.float64), nan=0.0, posinf=1.0, neginf=0.0)
    return np.clip(x, 0.0, 1.0)
