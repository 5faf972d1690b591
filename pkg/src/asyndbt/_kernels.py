"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``ASYNDBT_DISABLE_NUMBA=1`` in the environment before import to force the
numpy implementations (useful for debugging and for benchmarking one path
against the other).  Both paths implement the same algorithms and consume the
same random draws, so they return identical indices and agree on floating
point results to rounding.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("ASYNDBT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLE:
        raise ImportError("numba disabled by ASYNDBT_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# capped-simplex projection
#
# s(v) = sum(clip(x - v, 0, 1)) - 1 is piecewise linear in v with breakpoints
# at x_i - 1 (coordinate leaves the cap, slope -1) and x_i (coordinate hits 0,
# slope +1).  Sweep the sorted breakpoints to bracket the root, then solve the
# linear piece exactly from the capped/active index sets.
# ---------------------------------------------------------------------------

def _project_rows_np(x):
    m, n = x.shape
    bps = np.concatenate([x - 1.0, x], axis=1)
    deltas = np.concatenate([-np.ones((m, n)), np.ones((m, n))], axis=1)
    order = np.argsort(bps, axis=1, kind="stable")
    b = np.take_along_axis(bps, order, axis=1)
    d = np.take_along_axis(deltas, order, axis=1)
    slope = np.cumsum(d, axis=1)
    steps = slope[:, :-1] * np.diff(b, axis=1)
    s = np.empty((m, 2 * n))
    s[:, 0] = n - 1.0
    s[:, 1:] = (n - 1.0) + np.cumsum(steps, axis=1)
    k = np.argmax(s[:, 1:] <= 0.0, axis=1)
    rows = np.arange(m)
    mid = 0.5 * (b[rows, k] + b[rows, k + 1])[:, None]
    capped = (x - 1.0) >= mid
    active = ((x - 1.0) < mid) & (x > mid)
    n_active = active.sum(axis=1)
    v = (capped.sum(axis=1) + np.where(active, x, 0.0).sum(axis=1) - 1.0) / np.maximum(n_active, 1)
    # degenerate bracket (no active coordinate): root sits on a breakpoint
    v = np.where(n_active > 0, v, b[rows, k])
    return np.clip(x - v[:, None], 0.0, 1.0), v


def _project_rows_nb_impl(x):
    m, n = x.shape
    out = np.empty_like(x)
    vs = np.empty(m)
    bps = np.empty(2 * n)
    deltas = np.empty(2 * n)
    for r in range(m):
        for i in range(n):
            bps[i] = x[r, i] - 1.0
            deltas[i] = -1.0
            bps[n + i] = x[r, i]
            deltas[n + i] = 1.0
        order = np.argsort(bps, kind="mergesort")
        s = n - 1.0
        slope = 0.0
        lo = bps[order[0]]
        hi = lo
        for k in range(2 * n - 1):
            slope += deltas[order[k]]
            nxt = s + slope * (bps[order[k + 1]] - bps[order[k]])
            if nxt <= 0.0:
                lo = bps[order[k]]
                hi = bps[order[k + 1]]
                break
            s = nxt
        mid = 0.5 * (lo + hi)
        n_cap = 0
        n_act = 0
        acc = 0.0
        for i in range(n):
            xi = x[r, i]
            if xi - 1.0 >= mid:
                n_cap += 1
            elif xi > mid:
                n_act += 1
                acc += xi
        if n_act > 0:
            v = (n_cap + acc - 1.0) / n_act
        else:
            v = lo
        vs[r] = v
        for i in range(n):
            y = x[r, i] - v
            out[r, i] = 0.0 if y < 0.0 else (1.0 if y > 1.0 else y)
    return out, vs


# ---------------------------------------------------------------------------
# inverse-CDF categorical sampling, one categorical per row of ``cdf``
# ---------------------------------------------------------------------------

def _sample_cdf_np(cdf, u):
    n_samples, k_rows = u.shape
    n = cdf.shape[1]
    out = np.empty((n_samples, k_rows), dtype=np.int64)
    for k in range(k_rows):
        idx = np.searchsorted(cdf[k], u[:, k] * cdf[k, n - 1], side="right")
        out[:, k] = np.minimum(idx, n - 1)
    return out


def _sample_cdf_nb_impl(cdf, u):
    n_samples, k_rows = u.shape
    n = cdf.shape[1]
    out = np.empty((n_samples, k_rows), dtype=np.int64)
    for k in range(k_rows):
        row = cdf[k]
        total = row[n - 1]
        for s in range(n_samples):
            idx = np.searchsorted(row, u[s, k] * total, side="right")
            out[s, k] = idx if idx < n else n - 1
    return out


# ---------------------------------------------------------------------------
# score-function accumulation: sum_s w_s e_{idx} / max(prob[idx], p_min)
# ---------------------------------------------------------------------------

def _score_accumulate_np(idx, weights, probs, p_min):
    n_samples, k_rows = idx.shape
    grad = np.zeros(probs.shape)
    sq = np.zeros(probs.shape)
    for k in range(k_rows):
        col = idx[:, k]
        vals = weights / np.maximum(probs[k, col], p_min)
        np.add.at(grad[k], col, vals)
        np.add.at(sq[k], col, vals * vals)
    return grad, sq


def _score_accumulate_nb_impl(idx, weights, probs, p_min):
    n_samples, k_rows = idx.shape
    grad = np.zeros(probs.shape)
    sq = np.zeros(probs.shape)
    for k in range(k_rows):
        for s in range(n_samples):
            j = idx[s, k]
            pj = probs[k, j]
            val = weights[s] / (pj if pj > p_min else p_min)
            grad[k, j] += val
            sq[k, j] += val * val
    return grad, sq


if HAS_NUMBA:
    _project_rows_nb = njit(cache=True)(_project_rows_nb_impl)
    _sample_cdf_nb = njit(cache=True)(_sample_cdf_nb_impl)
    _score_accumulate_nb = njit(cache=True)(_score_accumulate_nb_impl)

    project_rows = _project_rows_nb
    sample_cdf = _sample_cdf_nb
    score_accumulate = _score_accumulate_nb
else:
    project_rows = _project_rows_np
    sample_cdf = _sample_cdf_np
    score_accumulate = _score_accumulate_np


def implementations():
    """Return ``{name: {backend: callable}}`` for every kernel (benchmarks use this)."""
    table = {
        "project_rows": {"numpy": _project_rows_np},
        "sample_cdf": {"numpy": _sample_cdf_np},
        "score_accumulate": {"numpy": _score_accumulate_np},
    }
    if HAS_NUMBA:
        table["project_rows"]["numba"] = _project_rows_nb
        table["sample_cdf"]["numba"] = _sample_cdf_nb
        table["score_accumulate"]["numba"] = _score_accumulate_nb
    return table
