"""Session configuration: one YAML file freezes the whole protocol.

Relative paths are resolved against the config file's directory, so a session
directory can be copied elsewhere and replayed byte-for-byte.
"""
from __future__ import annotations

import copy
import datetime
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .evaluation import GateConfig
from .panel import DerivedWindowConfig, SplitConfig
from .portfolio import PortfolioConfig
from .search import BatchConfig
from .synth import SynthConfig

DEFAULTS: dict[str, Any] = {
    "seed": 42,
    "data": {"path": "data/panel.csv", "schema": {}, "extra_columns": []},
    "filter": {"min_history_days": 180, "min_avg_volume": 10000.0, "rolling_volume": False, "volume_window": 30},
    "windows": {"relvol": 20, "rvol": 20, "price_to_ma": 20},
    "target": {"exec_lag": 1, "hold": 1},
    "split": SplitConfig().to_dict(),
    "gate": GateConfig().to_dict(),
    "search": {"rounds": 5, "batch": {"mechanical": 6, "hypothesis": 6}, "max_depth": 8,
               "quantile": 0.2, "max_workers": 1},
    "agent": {"kind": "stub", "focus_columns": [], "focus_prob": 0.5, "exploit_prob": 0.25},
    "curation": {"corr_threshold": 0.7, "max_size": 10},
    "ridge": {"lambda": 1.0},
    "portfolio": {"n_groups": 5, "fee_one_way": 0.0005},
    "fees": [0.0, 0.0005, 0.001, 0.002, 0.003],
    "fee_sweep": {"window": "oos", "benchmark": "market"},
    "clock": {"mode": "fixed", "epoch": "2026-01-01T00:00:00Z"},
    "synth": {"n_assets": 50, "n_days": 1825, "planted_ic": 0.05, "start": "2020-01-01"},
    "output_dir": "out",
}


def _plain(obj):
    """YAML may hand back dates; the canonical form keeps everything JSON-native."""
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (datetime.date, datetime.datetime)):
        return obj.isoformat()
    return obj


def _merge(base: dict, over: Mapping, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and base[k] and k not in ("schema",):
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            if k == "agent":
                out[k] = {**base[k], **v}
            else:
                out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class SessionConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    # -- construction ----------------------------------------------------------
    @classmethod
    def from_dict(cls, d: Mapping | None, base_dir=None) -> "SessionConfig":
        cfg = cls(_merge(DEFAULTS, _plain(d or {})), Path(base_dir or Path.cwd()))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "SessionConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if data is not None and not isinstance(data, Mapping):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data, path.parent.resolve())

    def check(self) -> None:
        """Build every typed sub-config once so bad values fail early."""
        try:
            self.split, self.gate, self.windows, self.batch, self.portfolio
            self.synth_config()
            ridge = float(self.raw["ridge"]["lambda"])
            fees = [float(f) for f in self.raw["fees"]]
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if ridge < 0:
            raise ConfigError("ridge.lambda must be >= 0")
        if fees != sorted(fees) or any(f < 0 for f in fees):
            raise ConfigError("fees must be non-negative and sorted ascending")
        if self.raw["agent"]["kind"] not in ("stub", "remote"):
            raise ConfigError("agent.kind must be 'stub' or 'remote'")
        if self.raw["clock"]["mode"] not in ("fixed", "wall"):
            raise ConfigError("clock.mode must be 'fixed' or 'wall'")
        if self.raw["fee_sweep"]["window"] not in ("train", "validation", "oos"):
            raise ConfigError("fee_sweep.window must be train, validation or oos")
        if int(self.raw["search"]["rounds"]) < 1:
            raise ConfigError("search.rounds must be >= 1")

    # -- typed views -------------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def split(self) -> SplitConfig:
        return SplitConfig.from_dict(self.raw["split"])

    @property
    def gate(self) -> GateConfig:
        g = self.raw["gate"]
        return GateConfig(float(g["tau_ic"]), float(g["tau_t"]), int(g["min_names_per_day"]), int(g["min_days"]))

    @property
    def windows(self) -> DerivedWindowConfig:
        return DerivedWindowConfig(**{k: int(v) for k, v in self.raw["windows"].items()})

    @property
    def batch(self) -> BatchConfig:
        b = self.raw["search"]["batch"]
        return BatchConfig(int(b["mechanical"]), int(b["hypothesis"]))

    @property
    def portfolio(self) -> PortfolioConfig:
        p = self.raw["portfolio"]
        return PortfolioConfig(n_groups=int(p["n_groups"]), fee_one_way=float(p["fee_one_way"]),
                               exec_lag=int(self.raw["target"]["exec_lag"]))

    def synth_config(self, **override) -> SynthConfig:
        s = {**self.raw["synth"], **override}
        return SynthConfig(seed=self.seed, n_assets=int(s["n_assets"]), n_days=int(s["n_days"]),
                           planted_ic=float(s["planted_ic"]), start=str(s["start"]),
                           exec_lag=int(self.raw["target"]["exec_lag"]))

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def data_path(self) -> Path:
        return self.path(self.raw["data"]["path"])

    @property
    def output_dir(self) -> Path:
        return self.path(self.raw["output_dir"])

    # -- identity ------------------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"), ensure_ascii=True)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("ascii")).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
