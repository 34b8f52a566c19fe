"""Train-window signal evaluation: daily IC, its t-stat, signal L-S Sharpe, coverage, gate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InsufficientDataError

PERIODS_PER_YEAR = 365

REASON_MEAN_IC = "mean IC"
REASON_TSTAT = "t-stat"
REASON_DAYS = "insufficient days"


def _none_if_nan(x):
    """JSON-safe float: NaN becomes null, infinities become signed strings."""
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return x


def _nan_if_none(x):
    return math.nan if x is None else float(x)


@dataclass(frozen=True)
class EvalMetrics:
    mean_ic: float
    ic_tstat: float
    ls_sharpe: float
    coverage: float
    n_days: int
    tstat_degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("mean_ic", "ic_tstat", "ls_sharpe", "coverage"):
            d[k] = _none_if_nan(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMetrics":
        return cls(mean_ic=_nan_if_none(d["mean_ic"]), ic_tstat=_nan_if_none(d["ic_tstat"]),
                   ls_sharpe=_nan_if_none(d["ls_sharpe"]), coverage=_nan_if_none(d["coverage"]),
                   n_days=int(d["n_days"]), tstat_degenerate=bool(d.get("tstat_degenerate", False)))


@dataclass(frozen=True)
class GateConfig:
    tau_ic: float = 0.01
    tau_t: float = 2.0
    min_names_per_day: int = 5
    min_days: int = 60

    def __post_init__(self):
        if not (math.isfinite(self.tau_ic) and math.isfinite(self.tau_t)):
            raise ValueError("gate thresholds must be finite")
        if self.min_names_per_day < 3:
            raise ValueError("min_names_per_day must be >= 3")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reasons: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "reasons": list(self.reasons)}

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(bool(d["passed"]), tuple(d["reasons"]))


def daily_ic(scores: np.ndarray, targets: np.ndarray, min_names: int = 5) -> np.ndarray:
    """Per-date Pearson correlation across assets with both values present.

    A date is missing when fewer than ``min_names`` pairs exist or either side
    is constant on that date.
    """
    if scores.shape != targets.shape:
        raise ValueError("scores and targets must share shape")
    valid = ~np.isnan(scores) & ~np.isnan(targets)
    cnt = valid.sum(axis=0)
    x = np.where(valid, scores, 0.0)
    y = np.where(valid, targets, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dx = np.where(valid, x - x.sum(axis=0) / cnt, 0.0)
        dy = np.where(valid, y - y.sum(axis=0) / cnt, 0.0)
        ic = (dx * dy).sum(axis=0) / np.sqrt((dx * dx).sum(axis=0) * (dy * dy).sum(axis=0))
    flat_x = np.where(valid, scores, -np.inf).max(axis=0) == np.where(valid, scores, np.inf).min(axis=0)
    flat_y = np.where(valid, targets, -np.inf).max(axis=0) == np.where(valid, targets, np.inf).min(axis=0)
    ic[(cnt < min_names) | flat_x | flat_y] = np.nan
    ic[~np.isfinite(ic)] = np.nan
    return ic


def summarize_ic(ic: np.ndarray) -> tuple[float, float, bool]:
    """Mean IC, one-sample t-stat against zero, and a flag for zero-spread series.

    A zero-spread series gets an infinite t-stat carrying the mean's sign (nan
    when the mean is also zero) instead of raising, so trace records stay complete.
    """
    ic = np.asarray(ic, dtype=float)
    ic = ic[~np.isnan(ic)]
    n = ic.size
    if n < 2:
        raise InsufficientDataError(f"need >= 2 defined ICs, got {n}")
    mean = float(ic.mean())
    if ic.max() == ic.min():
        t = math.copysign(math.inf, mean) if mean != 0 else math.nan
        return mean, t, True
    sd = float(ic.std(ddof=1))
    return mean, mean / (sd / math.sqrt(n)), False


def ls_spread(scores: np.ndarray, targets: np.ndarray, quantile: float = 0.2) -> np.ndarray:
    """Daily top-minus-bottom quantile mean target; NaN on skipped dates."""
    if not 0 < quantile <= 0.5:
        raise ValueError("quantile must be in (0, 0.5]")
    n_dates = scores.shape[1]
    out = np.full(n_dates, np.nan)
    for t in range(n_dates):
        s, r = scores[:, t], targets[:, t]
        ok = np.flatnonzero(~np.isnan(s) & ~np.isnan(r))
        n = ok.size
        if n < 2 / quantile - 1e-9:
            continue
        k = int(math.floor(n * quantile + 1e-9))
        order = ok[np.argsort(s[ok], kind="stable")]
        out[t] = r[order[-k:]].mean() - r[order[:k]].mean()
    return out


def annualized_sharpe(series: np.ndarray, periods: int = PERIODS_PER_YEAR) -> float:
    x = np.asarray(series, dtype=float)
    x = x[~np.isnan(x)]
    if x.size < 2:
        return math.nan
    sd = x.std(ddof=1)
    if not sd > 0:
        return math.nan
    return float(x.mean() / sd * math.sqrt(periods))


def signal_ls_sharpe(scores: np.ndarray, targets: np.ndarray, quantile: float = 0.2) -> float:
    """Gross annualized Sharpe of an equal-weight top/bottom quantile spread."""
    return annualized_sharpe(ls_spread(scores, targets, quantile))


def coverage(scores: np.ndarray, tradable: np.ndarray) -> float:
    """Share of tradable cells with a non-missing score."""
    tradable = np.asarray(getattr(tradable, "tradable", tradable), dtype=bool)
    denom = int(tradable.sum())
    if denom == 0:
        return 0.0
    return float((~np.isnan(scores) & tradable).sum() / denom)


def evaluate_signal(scores: np.ndarray, targets: np.ndarray, tradable: np.ndarray,
                    date_idx: np.ndarray, min_names: int = 5, quantile: float = 0.2) -> EvalMetrics:
    """Metrics on the formation dates in ``date_idx``; nothing outside is read."""
    s = np.where(tradable[:, date_idx], scores[:, date_idx], np.nan)
    r = targets[:, date_idx]
    ic = daily_ic(s, r, min_names)
    n_days = int((~np.isnan(ic)).sum())
    try:
        mean_ic, t, degenerate = summarize_ic(ic)
    except InsufficientDataError:
        mean_ic, t, degenerate = math.nan, math.nan, False
    return EvalMetrics(mean_ic=mean_ic, ic_tstat=t, ls_sharpe=signal_ls_sharpe(s, r, quantile),
                       coverage=coverage(s, tradable[:, date_idx]), n_days=n_days,
                       tstat_degenerate=degenerate)


def apply_gate(m: EvalMetrics, g: GateConfig) -> Verdict:
    reasons = []
    if not m.mean_ic >= g.tau_ic:
        reasons.append(REASON_MEAN_IC)
    if not m.ic_tstat >= g.tau_t:
        reasons.append(REASON_TSTAT)
    if not m.n_days >= g.min_days:
        reasons.append(REASON_DAYS)
    return Verdict(not reasons, tuple(reasons))
