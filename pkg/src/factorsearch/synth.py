"""Synthetic daily crypto-style panel with a planted predictive column.

Each asset carries a hidden AR(1) series ``alpha`` (stationary, unit variance).
The close-to-close return realized from t+1 to t+2 loads on ``alpha`` at t, so
with the default execution lag of one day the cross-sectional Pearson IC between
``alpha`` and the forward-return target is close to ``planted_ic``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

PLANTED_COLUMN = "alpha"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_assets: int = 50
    n_days: int = 1825
    planted_ic: float = 0.05
    start: str = "2020-01-01"
    vol: float = 0.03
    market_vol: float = 0.02
    phi: float = 0.5
    exec_lag: int = 1

    def __post_init__(self):
        if not 0.0 <= self.planted_ic <= 0.3:
            raise ValueError("planted_ic must lie in [0, 0.3]")
        if self.n_assets < 2 or self.n_days < 3:
            raise ValueError("need at least 2 assets and 3 days")
        if not -1.0 < self.phi < 1.0:
            raise ValueError("phi must lie in (-1, 1)")


def generate(cfg: SynthConfig) -> pd.DataFrame:
    """Long-format frame: date, symbol, open, high, low, close, volume, market_cap, alpha."""
    rng = np.random.default_rng(cfg.seed)
    A, T = cfg.n_assets, cfg.n_days

    alpha = np.empty((A, T))
    alpha[:, 0] = rng.standard_normal(A)
    innov = rng.standard_normal((A, T)) * math.sqrt(1.0 - cfg.phi**2)
    for t in range(1, T):
        alpha[:, t] = cfg.phi * alpha[:, t - 1] + innov[:, t]

    # return realized on day t (close[t-1] -> close[t]) loads on alpha[t - exec_lag - 1]
    k = cfg.exec_lag + 1
    noise = rng.standard_normal((A, T))
    market = rng.standard_normal(T) * cfg.market_vol
    loading = np.zeros((A, T))
    loading[:, k:] = alpha[:, :-k]
    ic = cfg.planted_ic
    idio = np.where(np.arange(T) >= k, ic * loading + math.sqrt(1.0 - ic**2) * noise, noise)
    rets = np.clip(market[None, :] + cfg.vol * idio, -0.9, None)
    rets[:, 0] = 0.0

    start_px = np.exp(rng.uniform(np.log(0.5), np.log(500.0), A))
    close = start_px[:, None] * np.cumprod(1.0 + rets, axis=1)
    gap = 1.0 + 0.002 * rng.standard_normal((A, T))
    prev = np.concatenate([start_px[:, None], close[:, :-1]], axis=1)
    open_ = prev * gap
    wick = np.abs(rng.standard_normal((A, T, 2))) * 0.01
    high = np.maximum(open_, close) * (1.0 + wick[..., 0])
    low = np.minimum(open_, close) * (1.0 - wick[..., 1])
    volume = np.exp(rng.normal(14.0, 1.0, A)[:, None] + 0.5 * rng.standard_normal((A, T)))
    supply = np.exp(rng.uniform(np.log(1e6), np.log(1e9), A))
    mcap = close * supply[:, None]

    dates = pd.date_range(cfg.start, periods=T, freq="D").strftime("%Y-%m-%d")
    symbols = [f"A{i:03d}" for i in range(A)]
    frame = pd.DataFrame({
        "date": np.tile(dates, A),
        "symbol": np.repeat(symbols, T),
        "open": open_.ravel(), "high": high.ravel(), "low": low.ravel(), "close": close.ravel(),
        "volume": volume.ravel(), "market_cap": mcap.ravel(), PLANTED_COLUMN: alpha.ravel(),
    })
    return frame


def write_csv(frame: pd.DataFrame, path) -> Path:
    """Write with a fixed float format so identical seeds give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return path
