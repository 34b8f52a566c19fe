"""Per-asset time-series primitives on (asset x date) matrices.

Missing values are NaN. Every window is a trailing window of date positions,
and a window containing any missing value yields missing. Sums are
accumulated left to right so a value at date t never depends on data after t
and is bit-identical on any prefix of the date axis.
"""
from __future__ import annotations

import math

import numpy as np

_log1p = np.frompyfunc(math.log1p, 1, 1)
_log = np.frompyfunc(math.log, 1, 1)


def finite_or_nan(x: np.ndarray) -> np.ndarray:
    out = np.asarray(x, dtype=float).copy()
    out[~np.isfinite(out)] = np.nan
    return out


def shift(x: np.ndarray, n: int) -> np.ndarray:
    """Value from n dates earlier; the first n dates are missing."""
    out = np.full_like(x, np.nan, dtype=float)
    if n < x.shape[1]:
        out[:, n:] = x[:, : x.shape[1] - n]
    return out


def rolling_sum(x: np.ndarray, w: int) -> np.ndarray:
    n_dates = x.shape[1]
    out = np.full(x.shape, np.nan)
    if w > n_dates:
        return out
    m = n_dates - w + 1
    acc = x[:, 0:m].astype(float)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow surfaces as inf, cleaned by callers
        for k in range(1, w):
            acc = acc + x[:, k : k + m]
    out[:, w - 1 :] = acc
    return out


def rolling_mean(x: np.ndarray, w: int) -> np.ndarray:
    return rolling_sum(x, w) / w


def rolling_std(x: np.ndarray, w: int) -> np.ndarray:
    """Sample (n - 1) standard deviation over a trailing window of w dates."""
    n_dates = x.shape[1]
    out = np.full(x.shape, np.nan)
    if w < 2 or w > n_dates:
        return out
    m = n_dates - w + 1
    mean = rolling_sum(x, w)[:, w - 1 :] / w
    with np.errstate(over="ignore", invalid="ignore"):
        ss = (x[:, 0:m] - mean) ** 2
        for k in range(1, w):
            ss = ss + (x[:, k : k + m] - mean) ** 2
        out[:, w - 1 :] = np.sqrt(ss / (w - 1))
    return out


def diff(x: np.ndarray, n: int) -> np.ndarray:
    return x - shift(x, n)


def pct_change(x: np.ndarray, n: int) -> np.ndarray:
    prev = shift(x, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x / prev - 1.0
    out[prev == 0] = np.nan
    return finite_or_nan(out)


def log1p(x: np.ndarray) -> np.ndarray:
    """ln(1 + x), missing where x <= -1.

    Uses the C library's scalar routine cell by cell: numpy's SIMD kernels may
    differ in the last bit depending on array layout, which would make exact
    ties (and hence ranks) depend on how a matrix was sliced.
    """
    x = np.asarray(x, dtype=float)
    ok = x > -1.0
    out = np.full(x.shape, np.nan)
    out[ok] = _log1p(x[ok]).astype(float)
    return out


def log(x: np.ndarray) -> np.ndarray:
    """Natural log, missing where x <= 0; scalar libm per cell (see log1p)."""
    x = np.asarray(x, dtype=float)
    ok = x > 0.0
    out = np.full(x.shape, np.nan)
    out[ok] = _log(x[ok]).astype(float)
    return out
