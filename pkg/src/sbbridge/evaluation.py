"""Transport metrics: exact empirical 2-Wasserstein distance, subsampled
averaging for large sets, ECDF sup-distance, and control-error summaries.

``w2_exact`` solves the squared-Euclidean assignment problem exactly with a
shortest-augmenting-path solver, so it is the reference metric; the
subsampled variant is an upward-biased estimator used where exact assignment
at full size is out of budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

N_EXACT_MAX = 2048


@dataclass
class W2Result:
    value: float
    n_used: int
    method: str                       # exact_assignment | subsample_avg
    subsample_mean: float | None = None
    subsample_std: float | None = None


def w2_exact(a: np.ndarray, b: np.ndarray, n_exact_max: int = N_EXACT_MAX) -> W2Result:
    """Exact empirical W2 between equal-size sample sets: sqrt of the mean
    optimal squared-Euclidean assignment cost."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"sample sets must match in shape, got {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n > n_exact_max:
        raise ValueError(
            f"n = {n} exceeds the exact-assignment cap {n_exact_max}; use w2_subsampled"
        )
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return W2Result(
        value=float(np.sqrt(cost[rows, cols].mean())), n_used=n, method="exact_assignment"
    )


def w2_subsampled(
    a: np.ndarray,
    b: np.ndarray,
    n_sub: int,
    repeats: int,
    rng: np.random.Generator | int,
) -> W2Result:
    """Mean +/- std of w2_exact over independent subsample pairs.  Upward
    biased for the population distance; the bias shrinks with n_sub."""
    rng = np.random.default_rng(rng)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if n_sub > min(a.shape[0], b.shape[0]):
        raise ValueError("n_sub exceeds available samples")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    values = []
    for _ in range(repeats):
        ia = rng.choice(a.shape[0], size=n_sub, replace=False)
        ib = rng.choice(b.shape[0], size=n_sub, replace=False)
        values.append(w2_exact(a[ia], b[ib]).value)
    values = np.asarray(values)
    return W2Result(
        value=float(values.mean()),
        n_used=n_sub,
        method="subsample_avg",
        subsample_mean=float(values.mean()),
        subsample_std=float(values.std()),
    )


def ecdf_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: sup |F_a - F_b| over the
    pooled sample points (1-d only)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty input")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(np.sort(a), grid, side="right") / a.size
    fb = np.searchsorted(np.sort(b), grid, side="right") / b.size
    return float(np.abs(fa - fb).max())


def control_error(
    alpha_hat,
    sigma_hat,
    alpha_ref,
    sigma_ref,
    eval_points: np.ndarray,
) -> tuple[float, float]:
    """Max-abs drift and volatility errors over the evaluation points.
    Arguments are callables of x (constants are accepted too)."""
    eval_points = np.asarray(eval_points, dtype=np.float64).reshape(-1)

    def _eval(f, x):
        return float(f(x)) if callable(f) else float(f)

    a_err, s_err = 0.0, 0.0
    for x in eval_points:
        da = _eval(alpha_hat, x) - _eval(alpha_ref, x)
        ds = _eval(sigma_hat, x) - _eval(sigma_ref, x)
        if not (np.isfinite(da) and np.isfinite(ds)):
            raise ValueError(f"non-finite control value at x = {x}")
        a_err = max(a_err, abs(da))
        s_err = max(s_err, abs(ds))
    return a_err, s_err
