"""Auditable cross-sectional factor search: DSL, evaluation gate, trace, ridge combo, backtest."""

__version__ = "0.1.0"
