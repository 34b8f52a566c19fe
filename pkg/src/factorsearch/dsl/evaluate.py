"""Vectorized evaluation of recipe trees over (asset x date) matrices."""
from __future__ import annotations

from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .. import timeseries as ts
from . import nodes as n


def cs_rank(x: np.ndarray) -> np.ndarray:
    """Per-date percentile rank in (0, 1]; ties share their average rank."""
    if x.size == 0:
        return x.astype(float)
    ranks = rankdata(x, method="average", axis=0, nan_policy="omit")
    count = np.sum(~np.isnan(x), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = ranks / count
    out[np.isnan(x)] = np.nan
    return out


def _sum_over_assets(x: np.ndarray) -> np.ndarray:
    """Per-date sum of non-missing values, accumulated in asset order.

    A fixed summation order keeps results bitwise reproducible independent of
    numpy's pairwise-summation blocking.
    """
    acc = np.zeros(x.shape[1:])
    for row in x:
        with np.errstate(over="ignore", invalid="ignore"):
            acc = acc + np.where(np.isnan(row), 0.0, row)
    return acc


def cs_zscore(x: np.ndarray) -> np.ndarray:
    """Per-date (x - mean) / sample std; missing with < 2 names or zero spread."""
    if x.shape[0] == 0:
        return x.astype(float)
    valid = ~np.isnan(x)
    count = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        mean = _sum_over_assets(x) / count
        dev = x - mean
        std = np.sqrt(_sum_over_assets(dev * dev) / (count - 1))
        out = dev / std
    flat = np.where(valid, x, -np.inf).max(axis=0) == np.where(valid, x, np.inf).min(axis=0)
    # an overflowing spread is a non-finite intermediate, so the date is missing
    bad = (count < 2) | flat | ~(std > 0) | ~np.isfinite(std)
    out[:, bad] = np.nan
    out[~valid | ~np.isfinite(out)] = np.nan
    return out


def _lincomb(terms) -> np.ndarray:
    acc = None
    for w, val in terms:
        part = w * val
        acc = part if acc is None else acc + part
    return acc


def evaluate(expr: n.Expr, panel) -> np.ndarray:
    """Score matrix for ``expr``; ``panel`` is a Panel or a name -> matrix mapping.

    Missing inputs propagate to missing outputs and any non-finite intermediate
    result is treated as missing.
    """
    columns: Mapping[str, np.ndarray] = getattr(panel, "columns", panel)
    cache: dict = {}

    def ev(e: n.Expr) -> np.ndarray:
        if e in cache:
            return cache[e]
        if isinstance(e, n.Column):
            out = np.array(columns[e.name], dtype=float)
        elif isinstance(e, n.CsRank):
            out = cs_rank(ev(e.child))
        elif isinstance(e, n.CsZscore):
            out = cs_zscore(ev(e.child))
        elif isinstance(e, n.Lag):
            out = ts.shift(ev(e.child), e.n)
        elif isinstance(e, n.RollMean):
            out = ts.rolling_mean(ev(e.child), e.w)
        elif isinstance(e, n.RollStd):
            out = ts.rolling_std(ev(e.child), e.w)
        elif isinstance(e, n.Diff):
            out = ts.diff(ev(e.child), e.n)
        elif isinstance(e, n.PctChange):
            out = ts.pct_change(ev(e.child), e.n)
        elif isinstance(e, n.Log1p):
            out = ts.log1p(ev(e.child))
        elif isinstance(e, n.Abs):
            out = np.abs(ev(e.child))
        elif isinstance(e, n.Clip):
            out = np.clip(ev(e.child), e.lo, e.hi)
        elif isinstance(e, n.LinComb):
            with np.errstate(over="ignore", invalid="ignore"):
                out = _lincomb((w, ev(c)) for w, c in e.terms)
        else:
            raise TypeError(f"not an expression node: {e!r}")
        out = ts.finite_or_nan(out)
        cache[e] = out
        return out

    return ev(expr)
