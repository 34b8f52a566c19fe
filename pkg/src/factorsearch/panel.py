"""Point-in-time market panel: ingest, universe filter, derived columns, targets, splits."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from . import timeseries as ts
from .errors import DataError

RAW_FIELDS = ("date", "symbol", "open", "high", "low", "close", "volume", "market_cap")
RAW_COLUMNS = ("open", "high", "low", "close", "volume", "mcap")
DERIVED_COLUMNS = ("ret", "logret", "relvol", "rvol", "price_to_ma", "range", "vol_pct_change")
DEFAULT_SCHEMA = {f: f for f in RAW_FIELDS}


@dataclass(frozen=True)
class Panel:
    """Immutable asset x date grid. Assets are kept in sorted name order."""

    assets: tuple[str, ...]
    dates: np.ndarray
    columns: Mapping[str, np.ndarray]
    tradable: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (len(self.assets), len(self.dates))
        frozen = {}
        for name, arr in self.columns.items():
            arr = np.array(arr, dtype=float)
            if arr.shape != shape:
                raise ValueError(f"column {name!r} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        mask = np.array(self.tradable, dtype=bool)
        if mask.shape != shape:
            raise ValueError("tradable mask shape mismatch")
        mask.setflags(write=False)
        object.__setattr__(self, "columns", frozen)
        object.__setattr__(self, "tradable", mask)
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "dates", np.asarray(self.dates, dtype="datetime64[D]"))
        if len(self.dates) > 1 and not np.all(np.diff(self.dates) > np.timedelta64(0, "D")):
            raise ValueError("dates must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.assets), len(self.dates)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def with_columns(self, new: Mapping[str, np.ndarray], **provenance) -> "Panel":
        cols = dict(self.columns)
        cols.update(new)
        prov = dict(self.provenance, **provenance)
        return Panel(self.assets, self.dates, cols, self.tradable, prov)

    def truncate(self, n_dates: int) -> "Panel":
        """Prefix of the first n_dates dates."""
        cols = {k: v[:, :n_dates] for k, v in self.columns.items()}
        return Panel(self.assets, self.dates[:n_dates], cols, self.tradable[:, :n_dates], dict(self.provenance))

    def select_assets(self, keep: np.ndarray) -> "Panel":
        keep = np.asarray(keep, dtype=bool)
        cols = {k: v[keep] for k, v in self.columns.items()}
        assets = tuple(a for a, k in zip(self.assets, keep) if k)
        return Panel(assets, self.dates, cols, self.tradable[keep], dict(self.provenance))

    def date_mask(self, start, end) -> np.ndarray:
        start, end = np.datetime64(start, "D"), np.datetime64(end, "D")
        return (self.dates >= start) & (self.dates <= end)


@dataclass
class IngestReport:
    source: str
    n_rows: int = 0
    n_kept: int = 0
    dropped: dict = field(default_factory=dict)
    n_assets: int = 0
    n_dates: int = 0

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())

    def to_jsonl(self) -> str:
        lines = [{"event": "dropped", "reason": r, "count": c} for r, c in sorted(self.dropped.items())]
        summary = asdict(self)
        summary.pop("dropped")
        summary["n_dropped"] = self.n_dropped
        lines.append({"event": "summary", **summary})
        return "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)


@dataclass(frozen=True)
class DerivedWindowConfig:
    relvol: int = 20
    rvol: int = 20
    price_to_ma: int = 20


def load_panel(path, schema: Mapping[str, str] | None = None,
               extra_columns: tuple[str, ...] = ()) -> tuple[Panel, IngestReport]:
    """Read a long-format daily bar CSV into a raw Panel.

    ``schema`` maps canonical field names (date, symbol, open, high, low, close,
    volume, market_cap) to CSV headers. ``extra_columns`` are additional numeric
    headers carried through verbatim as point-in-time columns.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    wanted = [schema[f] for f in RAW_FIELDS] + list(extra_columns)
    missing = [c for c in wanted if c not in df.columns]
    if missing:
        raise DataError(f"missing required column(s): {', '.join(missing)}")

    report = IngestReport(source=str(path), n_rows=len(df))
    sym = df[schema["symbol"]].str.strip()
    raw_dates = df[schema["date"]].str.strip()
    dates = pd.to_datetime(raw_dates, format="%Y-%m-%d", errors="coerce")
    bad = dates.isna() & (raw_dates != "")
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"unparseable date {raw_dates.iloc[i]!r} on data row {i + 1}")

    numeric_names = ["open", "high", "low", "close", "volume", "market_cap", *extra_columns]
    values = {}
    for f in numeric_names:
        src = df[schema.get(f, f)].str.strip()
        num = pd.to_numeric(src, errors="coerce")
        bad = num.isna() & (src != "") & (src.str.lower() != "nan")
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"unparseable number {src.iloc[i]!r} in column {schema.get(f, f)!r} on data row {i + 1}")
        values[f] = num.to_numpy(dtype=float)

    key = pd.DataFrame({"symbol": sym, "date": dates})
    dup = key.duplicated(keep=False) & dates.notna() & (sym != "")
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise DataError(f"duplicate key ({sym.iloc[i]}, {raw_dates.iloc[i]})")

    o, h, l, c = values["open"], values["high"], values["low"], values["close"]
    v, m = values["volume"], values["market_cap"]
    checks = [
        ("missing_key", dates.isna().to_numpy() | (sym == "").to_numpy()),
        ("missing_field", np.isnan(o) | np.isnan(h) | np.isnan(l) | np.isnan(c) | np.isnan(v) | np.isnan(m)),
        ("nonpositive_price", (o <= 0) | (h <= 0) | (l <= 0) | (c <= 0)),
        ("negative_volume_or_mcap", (v < 0) | (m < 0)),
        ("ohlc_order", (l > np.minimum(o, c)) | (np.maximum(o, c) > h)),
    ]
    drop = np.zeros(len(df), dtype=bool)
    for reason, mask in checks:
        mask = mask & ~drop
        if mask.any():
            report.dropped[reason] = int(mask.sum())
        drop |= mask
    keep = ~drop
    report.n_kept = int(keep.sum())
    if report.n_kept == 0:
        raise DataError("no valid rows after ingest checks")

    assets = tuple(sorted(set(sym[keep])))
    all_dates = np.array(sorted(set(dates[keep].to_numpy().astype("datetime64[D]"))), dtype="datetime64[D]")
    a_idx = pd.Index(assets).get_indexer(sym[keep])
    d_idx = np.searchsorted(all_dates, dates[keep].to_numpy().astype("datetime64[D]"))
    shape = (len(assets), len(all_dates))

    cols = {}
    rename = {"market_cap": "mcap"}
    for f in numeric_names:
        mat = np.full(shape, np.nan)
        mat[a_idx, d_idx] = values[f][keep]
        cols[rename.get(f, f)] = mat
    report.n_assets, report.n_dates = shape
    tradable = ~np.isnan(cols["close"])
    prov = {"source": str(path), "schema": dict(sorted(schema.items())),
            "extra_columns": list(extra_columns)}
    return Panel(assets, all_dates, cols, tradable, prov), report


def filter_universe(panel: Panel, min_history_days: int = 180, min_avg_volume: float = 10_000.0,
                    rolling_volume: bool = False, volume_window: int = 30) -> Panel:
    """Drop short-history / illiquid assets and mask each asset's warm-up period.

    The tradable mask is recomputed from observed rows, so the filter is idempotent.
    With ``rolling_volume`` the liquidity test is a trailing ``volume_window``-day
    mean evaluated per date instead of the full-history mean.
    """
    if min_history_days < 1:
        raise ValueError("min_history_days must be >= 1")
    observed = ~np.isnan(panel["close"])
    history = np.cumsum(observed, axis=1)
    tradable = observed & (history >= min_history_days)
    vol = panel["volume"]
    if rolling_volume:
        trailing = ts.rolling_mean(np.where(observed, vol, 0.0), volume_window)
        tradable &= np.nan_to_num(trailing, nan=-np.inf) >= min_avg_volume
        keep = tradable.any(axis=1)
    else:
        with np.errstate(invalid="ignore"):
            avg_vol = np.nanmean(np.where(observed, vol, np.nan), axis=1)
        keep = (observed.sum(axis=1) >= min_history_days) & (np.nan_to_num(avg_vol, nan=-np.inf) >= min_avg_volume)
    if not keep.any():
        raise DataError("empty universe after filtering")
    cols = {k: v[keep] for k, v in panel.columns.items()}
    prov = dict(panel.provenance, universe_filter={
        "min_history_days": min_history_days, "min_avg_volume": min_avg_volume,
        "rolling_volume": rolling_volume, "volume_window": volume_window})
    assets = tuple(a for a, k in zip(panel.assets, keep) if k)
    return Panel(assets, panel.dates, cols, tradable[keep], prov)


def compute_derived(panel: Panel, windows: DerivedWindowConfig = DerivedWindowConfig()) -> Panel:
    close, high, low, vol = panel["close"], panel["high"], panel["low"], panel["volume"]
    with np.errstate(divide="ignore", invalid="ignore"):
        ret = close / ts.shift(close, 1) - 1.0
        logret = ts.log(close) - ts.log(ts.shift(close, 1))
        vol_ma = ts.rolling_mean(vol, windows.relvol)
        relvol = np.where(vol_ma == 0, np.nan, vol / vol_ma)
        rvol = ts.rolling_std(logret, windows.rvol)
        price_to_ma = close / ts.rolling_mean(close, windows.price_to_ma)
        rng = (high - low) / close
    derived = {
        "ret": ts.finite_or_nan(ret),
        "logret": ts.finite_or_nan(logret),
        "relvol": ts.finite_or_nan(relvol),
        "rvol": ts.finite_or_nan(rvol),
        "price_to_ma": ts.finite_or_nan(price_to_ma),
        "range": ts.finite_or_nan(rng),
        "vol_pct_change": ts.pct_change(vol, 1),
    }
    return panel.with_columns(derived, derived_windows=asdict(windows))


def forward_return(panel: Panel, exec_lag: int = 1, hold: int = 1) -> np.ndarray:
    """Target at (i, t) = close[t + lag + hold] / close[t + lag] - 1, by date position."""
    if exec_lag < 1 or hold < 1:
        raise ValueError("exec_lag and hold must be >= 1")
    close = panel["close"]
    n = close.shape[1]
    out = np.full(close.shape, np.nan)
    entry, exit_ = exec_lag, exec_lag + hold
    if exit_ < n:
        out[:, : n - exit_] = close[:, exit_:] / close[:, entry : n - hold] - 1.0
    return ts.finite_or_nan(out)


def approved_columns(panel: Panel) -> frozenset[str]:
    return frozenset(panel.columns)


@dataclass(frozen=True)
class SplitConfig:
    train: tuple[str, str] = ("2020-01-01", "2022-12-31")
    validation: tuple[str, str] = ("2023-01-01", "2023-12-31")
    oos: tuple[str, str] = ("2024-01-01", "2025-12-31")

    def __post_init__(self):
        bounds = [tuple(np.datetime64(d, "D") for d in r) for r in (self.train, self.validation, self.oos)]
        for lo, hi in bounds:
            if lo > hi:
                raise ValueError(f"split range {lo}..{hi} is reversed")
        if not (bounds[0][1] < bounds[1][0] and bounds[1][1] < bounds[2][0]):
            raise ValueError("splits must be disjoint and ordered train < validation < oos")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitConfig":
        return cls(**{k: tuple(str(x) for x in d[k]) for k in ("train", "validation", "oos")})

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "oos": list(self.oos)}


@dataclass(frozen=True)
class Partitions:
    train: np.ndarray
    validation: np.ndarray
    oos: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)


WINDOWS = ("train", "validation", "oos")


def split(panel: Panel, cfg: SplitConfig) -> Partitions:
    """Date-index partitions keyed by signal-formation date."""
    parts = {}
    for name in WINDOWS:
        idx = np.flatnonzero(panel.date_mask(*getattr(cfg, name)))
        if idx.size == 0:
            raise DataError(f"empty {name} partition")
        parts[name] = idx
    return Partitions(**parts)


# -- cache -------------------------------------------------------------------
# A zip of .npy members with fixed timestamps, so identical panels give identical bytes.

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_panel(panel: Panel, path) -> None:
    meta = {"assets": list(panel.assets), "columns": sorted(panel.columns), "provenance": panel.provenance}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        _zip_write(zf, "dates.npy", _npy_bytes(panel.dates.astype("datetime64[D]").astype("int64")))
        _zip_write(zf, "tradable.npy", _npy_bytes(panel.tradable))
        for name in sorted(panel.columns):
            _zip_write(zf, f"col_{name}.npy", _npy_bytes(panel.columns[name]))


def load_cache(path) -> Panel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing panel cache: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        read = lambda n: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
        dates = read("dates.npy").astype("datetime64[D]")
        tradable = read("tradable.npy").astype(bool)
        cols = {c: read(f"col_{c}.npy").astype(float) for c in meta["columns"]}
    return Panel(tuple(meta["assets"]), dates, cols, tradable, meta["provenance"])
