"""Quantile portfolios, turnover, proportional costs, and performance reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError

PERIODS_PER_YEAR = 365
REPORT_COLUMNS = ("AnnRet", "AnnVol", "Sharpe", "MaxDD", "Calmar", "Turnover")
FEE_COLUMNS = ("Fee Rate", "AnnRet", "AnnVol", "Sharpe Ratio", "Alpha")
MIN_OBS = 30


@dataclass(frozen=True)
class PortfolioConfig:
    n_groups: int = 5
    weighting: str = "equal"
    fee_one_way: float = 0.0005
    exec_lag: int = 1
    rebalance: str = "daily"

    def __post_init__(self):
        if self.n_groups < 2:
            raise ValueError("n_groups must be >= 2")
        if self.fee_one_way < 0:
            raise ValueError("fee must be >= 0")
        if self.weighting not in ("equal", "cap"):
            raise ValueError("weighting must be 'equal' or 'cap'")
        if self.rebalance != "daily":
            raise ValueError("only daily rebalancing is supported")


def group_labels(n_groups: int) -> list[str]:
    return [f"Q{g}" for g in range(n_groups)] + ["L-S"]


def sort_groups(scores: np.ndarray, n_groups: int, tradable: np.ndarray | None = None) -> np.ndarray:
    """Per-date bucket index (0 = lowest scores); -1 where unassigned.

    Names are ranked ascending by score with ties broken by asset order (the
    panel keeps assets sorted by name). Bucket sizes differ by at most one and
    the larger buckets are the higher-numbered ones. Dates with fewer than
    ``n_groups`` names get no assignment.
    """
    valid = ~np.isnan(scores)
    if tradable is not None:
        valid &= tradable
    n_assets, n_dates = scores.shape
    keyed = np.where(valid, scores, np.inf)
    order = np.argsort(keyed, axis=0, kind="stable")
    pos = np.empty_like(order)
    np.put_along_axis(pos, order, np.arange(n_assets)[:, None].repeat(n_dates, axis=1), axis=0)
    n = valid.sum(axis=0)
    base = n // n_groups
    rem = n % n_groups
    boundary = (n_groups - rem) * base
    with np.errstate(divide="ignore", invalid="ignore"):
        low = pos // np.maximum(base, 1)
        high = (n_groups - rem) + (pos - boundary) // (base + 1)
    groups = np.where(pos < boundary, low, high)
    groups = np.where(valid & (n >= n_groups), groups, -1)
    return groups.astype(int)


def group_weights(assign: np.ndarray, group: int, weighting: str = "equal",
                  mcap: np.ndarray | None = None) -> np.ndarray:
    """Weights of one group per date, summing to 1 on dates where it is populated.

    Cap weights are market caps divided by the group's largest cap, so equal caps
    give exactly the unit weights used by equal weighting.
    """
    member = assign == group
    if weighting == "equal":
        raw = member.astype(float)
    elif weighting == "cap":
        if mcap is None:
            raise ValueError("cap weighting needs market caps")
        m = np.where(member & ~np.isnan(mcap) & (mcap > 0), mcap, 0.0)
        top = m.max(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            raw = np.where(top > 0, m / top, 0.0)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    total = raw.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, raw / total, 0.0)


def weighted_return(weights: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-date weighted mean target over held names with a known return; NaN if none."""
    held = (weights > 0) & ~np.isnan(targets)
    w = np.where(held, weights, 0.0)
    num = (w * np.where(held, targets, 0.0)).sum(axis=0)
    den = w.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


def group_returns(assign: np.ndarray, targets: np.ndarray, n_groups: int, weighting: str = "equal",
                  mcap: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(returns[n_groups, dates], weights[n_groups, assets, dates])."""
    W = np.stack([group_weights(assign, g, weighting, mcap) for g in range(n_groups)])
    R = np.stack([weighted_return(W[g], targets) for g in range(n_groups)])
    return R, W


def long_short(group_ret: np.ndarray) -> np.ndarray:
    return group_ret[-1] - group_ret[0]


def turnover(weights_t: np.ndarray, weights_prev: np.ndarray | None) -> float:
    """One-way traded fraction of one leg; a fresh deployment counts as 1.0."""
    if weights_prev is None or not np.any(weights_prev):
        return 1.0 if np.any(weights_t) else 0.0
    return 0.5 * float(np.abs(weights_t - weights_prev).sum())


def turnover_series(weights: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
    """Daily turnover of a leg over its (assets, dates) weight path.

    Dates where ``active`` is False hold the previous portfolio and trade nothing.
    """
    n_dates = weights.shape[1]
    active = np.ones(n_dates, bool) if active is None else active
    out = np.zeros(n_dates)
    prev = None
    for t in range(n_dates):
        if not active[t]:
            continue
        out[t] = turnover(weights[:, t], prev)
        prev = weights[:, t]
    return out


def apply_costs(gross: np.ndarray, turnover_: np.ndarray, fee_one_way: float) -> np.ndarray:
    return np.asarray(gross) - fee_one_way * np.asarray(turnover_)


def wealth_curve(returns: np.ndarray) -> np.ndarray:
    return np.cumprod(1.0 + np.asarray(returns, dtype=float))


def max_drawdown(returns: np.ndarray) -> float:
    w = np.concatenate([[1.0], wealth_curve(returns)])
    return float(np.min(w / np.maximum.accumulate(w) - 1.0))


@dataclass
class MetricsRow:
    label: str
    ann_ret: float
    ann_vol: float
    sharpe: float
    max_dd: float
    calmar: float
    turnover: float
    flags: tuple[str, ...] = field(default_factory=tuple)

    def values(self) -> tuple[float, ...]:
        return (self.ann_ret, self.ann_vol, self.sharpe, self.max_dd, self.calmar, self.turnover)


def metrics(net: np.ndarray, turnover_: np.ndarray | None = None, label: str = "",
            skip_first_turnover: bool = True) -> MetricsRow:
    """Annualized performance of a daily net return series.

    Sharpe and Calmar are NaN (and flagged) when undefined: zero variance or a
    zero drawdown.
    """
    r = np.asarray(net, dtype=float)
    T = r.size
    if T < MIN_OBS:
        raise InsufficientDataError(f"need >= {MIN_OBS} observations, got {T}")
    if np.isnan(r).any():
        raise ValueError("net series contains missing values")
    flags = []
    ann_ret = float(np.prod(1.0 + r) ** (PERIODS_PER_YEAR / T) - 1.0)
    sd = float(r.std(ddof=1))
    ann_vol = sd * math.sqrt(PERIODS_PER_YEAR)
    if np.ptp(r) > 0:
        sharpe = float(r.mean() / sd * math.sqrt(PERIODS_PER_YEAR))
    else:
        sharpe = math.nan
        flags.append("sharpe_undefined")
    mdd = max_drawdown(r)
    if mdd < 0:
        calmar = ann_ret / abs(mdd)
    else:
        calmar = math.nan
        flags.append("calmar_undefined")
    if turnover_ is None:
        to = math.nan
    else:
        tv = np.asarray(turnover_, dtype=float)
        tv = tv[1:] if skip_first_turnover else tv
        to = float(tv.mean()) if tv.size else math.nan
    return MetricsRow(label, ann_ret, ann_vol, sharpe, mdd, calmar, to, tuple(flags))


@dataclass
class BacktestResult:
    labels: list[str]
    dates: np.ndarray
    gross: np.ndarray      # (n_groups + 1, T), last row is L-S
    turnover: np.ndarray   # (n_groups + 1, T)
    fee_one_way: float
    rows: list[MetricsRow]
    index: np.ndarray      # panel date positions of the kept dates

    @property
    def net(self) -> np.ndarray:
        return apply_costs(self.gross, self.turnover, self.fee_one_way)

    def paths(self) -> list[tuple[str, str, float]]:
        """Long-format (date, series, cumulative return) rows."""
        out = []
        wealth = np.cumprod(1.0 + self.net, axis=1) - 1.0
        for k, label in enumerate(self.labels):
            for t, d in enumerate(self.dates):
                out.append((str(d), label, float(wealth[k, t])))
        return out


def backtest(scores: np.ndarray, targets: np.ndarray, date_idx: np.ndarray, cfg: PortfolioConfig,
             tradable: np.ndarray | None = None, mcap: np.ndarray | None = None,
             dates: np.ndarray | None = None) -> BacktestResult:
    """Daily-rebalanced quantile backtest over the formation dates in ``date_idx``.

    Targets already embed the execution lag. Dates where the L-S portfolio is
    undefined are dropped from every series; on those dates positions carry over.
    """
    date_idx = np.asarray(date_idx)
    s = scores[:, date_idx]
    r = targets[:, date_idx]
    tr = None if tradable is None else tradable[:, date_idx]
    mc = None if mcap is None else mcap[:, date_idx]
    g = cfg.n_groups
    assign = sort_groups(s, g, tr)
    R, W = group_returns(assign, r, g, cfg.weighting, mc)
    ls = long_short(R)
    active = ~np.isnan(R).any(axis=0)
    to = np.stack([turnover_series(W[k], active) for k in range(g)])
    gross = np.vstack([R, ls[None, :]])[:, active]
    turn = np.vstack([to, (to[-1] + to[0])[None, :]])[:, active]
    labels = group_labels(g)
    net = apply_costs(gross, turn, cfg.fee_one_way)
    rows = [metrics(net[k], turn[k], labels[k]) for k in range(g + 1)]
    d = np.arange(len(date_idx)) if dates is None else np.asarray(dates)[date_idx]
    return BacktestResult(labels, d[active], gross, turn, cfg.fee_one_way, rows, date_idx[active])


@dataclass
class FeeSweepRow:
    fee: float
    ann_ret: float
    ann_vol: float
    sharpe: float
    alpha: float


def fee_sweep(gross_ls: np.ndarray, turnover_ls: np.ndarray, fees: Sequence[float],
              benchmark: np.ndarray | None = None) -> tuple[list[FeeSweepRow], dict[float, np.ndarray]]:
    """Metrics of the L-S series at each fee, plus cumulative-return paths.

    Alpha is the annualized mean net return in excess of the benchmark's mean
    (zero benchmark when none is given).
    """
    fees = list(fees)
    if fees != sorted(fees):
        raise ValueError("fees must be sorted ascending")
    bench_mean = 0.0 if benchmark is None else float(np.nanmean(benchmark))
    rows, paths = [], {}
    for fee in fees:
        net = apply_costs(gross_ls, turnover_ls, fee)
        m = metrics(net, turnover_ls)
        alpha = (float(net.mean()) - bench_mean) * PERIODS_PER_YEAR
        rows.append(FeeSweepRow(fee, m.ann_ret, m.ann_vol, m.sharpe, alpha))
        paths[fee] = wealth_curve(net) - 1.0
    return rows, paths


def market_benchmark(targets: np.ndarray, tradable: np.ndarray | None = None) -> np.ndarray:
    """Equal-weight mean target of all tradable names per date."""
    ok = ~np.isnan(targets)
    if tradable is not None:
        ok &= tradable
    w = ok.astype(float)
    return weighted_return(w, np.where(ok, targets, np.nan))


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def report_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("Group", *REPORT_COLUMNS))
    for row in rows:
        w.writerow((row.label, *(_fmt(v) for v in row.values())))
    return buf.getvalue()


def fee_sweep_csv(rows: Sequence[FeeSweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FEE_COLUMNS)
    for row in rows:
        w.writerow((_fmt(row.fee), _fmt(row.ann_ret), _fmt(row.ann_vol), _fmt(row.sharpe), _fmt(row.alpha)))
    return buf.getvalue()


def paths_csv(rows: Sequence[tuple[str, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("date", "series", "value"))
    for d, s, v in rows:
        w.writerow((d, s, _fmt(v)))
    return buf.getvalue()
