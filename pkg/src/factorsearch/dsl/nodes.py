"""Expression tree for factor recipes.

Nodes are frozen dataclasses so trees hash, compare structurally, and can be
shared across threads. Constructors do not validate parameters; that is the
job of :func:`factorsearch.dsl.validate`, which reports every problem at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class Column:
    name: str


@dataclass(frozen=True)
class CsRank:
    child: "Expr"


@dataclass(frozen=True)
class CsZscore:
    child: "Expr"


@dataclass(frozen=True)
class Lag:
    n: int
    child: "Expr"


@dataclass(frozen=True)
class RollMean:
    w: int
    child: "Expr"


@dataclass(frozen=True)
class RollStd:
    w: int
    child: "Expr"


@dataclass(frozen=True)
class Diff:
    n: int
    child: "Expr"


@dataclass(frozen=True)
class PctChange:
    n: int
    child: "Expr"


@dataclass(frozen=True)
class Log1p:
    child: "Expr"


@dataclass(frozen=True)
class Abs:
    child: "Expr"


@dataclass(frozen=True)
class Clip:
    lo: float
    hi: float
    child: "Expr"


@dataclass(frozen=True)
class LinComb:
    terms: tuple[tuple[float, "Expr"], ...]


Expr = Union[Column, CsRank, CsZscore, Lag, RollMean, RollStd, Diff, PctChange,
             Log1p, Abs, Clip, LinComb]

CROSS_SECTIONAL = (CsRank, CsZscore)
TIME_SERIES = (Lag, RollMean, RollStd, Diff, PctChange)
NONLINEAR = (Log1p, Abs, Clip)
WINDOWED = TIME_SERIES

# surface syntax name -> node class
OPERATORS = {
    "col": Column,
    "cs_rank": CsRank,
    "cs_zscore": CsZscore,
    "lag": Lag,
    "roll_mean": RollMean,
    "roll_std": RollStd,
    "diff": Diff,
    "pct_change": PctChange,
    "log1p": Log1p,
    "abs": Abs,
    "clip": Clip,
    "lincomb": LinComb,
}
NAMES = {cls: name for name, cls in OPERATORS.items()}


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Column):
        return ()
    if isinstance(e, LinComb):
        return tuple(c for _, c in e.terms)
    return (e.child,)


def window_param(e: Expr) -> int | None:
    if isinstance(e, (Lag, Diff, PctChange)):
        return e.n
    if isinstance(e, (RollMean, RollStd)):
        return e.w
    return None


def depth(e: Expr) -> int:
    return 1 + max((depth(c) for c in children(e)), default=0)


def walk(e: Expr, path: tuple[int, ...] = ()):
    """Yield (path, node) pairs in pre-order."""
    yield path, e
    for i, c in enumerate(children(e)):
        yield from walk(c, path + (i,))


def columns_used(e: Expr) -> set[str]:
    return {n.name for _, n in walk(e) if isinstance(n, Column)}
