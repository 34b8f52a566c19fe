"""Constrained point-in-time factor DSL."""
from dataclasses import dataclass

from .evaluate import cs_rank, cs_zscore, evaluate
from .nodes import (Abs, Clip, Column, CsRank, CsZscore, Diff, Expr, Lag, LinComb, Log1p,
                    PctChange, RollMean, RollStd, columns_used, depth)
from .parser import canonical_form, parse_recipe
from .validate import DEFAULT_MAX_DEPTH, ValidationReport, Violation, validate


@dataclass(frozen=True)
class Recipe:
    name: str
    expr: Expr

    @property
    def source_text(self) -> str:
        return canonical_form(self.expr)

    @classmethod
    def from_text(cls, name: str, text: str) -> "Recipe":
        return cls(name, parse_recipe(text))


__all__ = [
    "Abs", "Clip", "Column", "CsRank", "CsZscore", "Diff", "Expr", "Lag", "LinComb", "Log1p",
    "PctChange", "Recipe", "RollMean", "RollStd", "ValidationReport", "Violation",
    "DEFAULT_MAX_DEPTH", "canonical_form", "columns_used", "cs_rank", "cs_zscore", "depth",
    "evaluate", "parse_recipe", "validate",
]
