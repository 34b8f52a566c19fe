from __future__ import annotations

from dataclasses import dataclass, field

from . import nodes as n

DEFAULT_MAX_DEPTH = 8

# Forward-looking operators have no node type, so any tree that parses reads
# only values dated at or before the evaluation date.
STRUCTURAL_GUARANTEE = "no forward-looking operator exists in the grammar"


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    path: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"rule": self.rule, "message": self.message, "path": ".".join(map(str, self.path))}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)
    note: str = STRUCTURAL_GUARANTEE

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def messages(self) -> list[str]:
        return [f"{v.rule}: {v.message}" + (f" at {'.'.join(map(str, v.path))}" if v.path else "")
                for v in self.violations]


def validate(expr: n.Expr, allowed_columns, max_depth: int = DEFAULT_MAX_DEPTH) -> ValidationReport:
    """Check a recipe against the DSL constraints; never raises.

    Rule ids: ``column`` (unapproved leaf), ``transform`` (no time-series or
    nonlinear node), ``depth``, ``window`` (parameter < 1), ``clip`` (lo >= hi).
    """
    allowed = set(allowed_columns)
    out: list[Violation] = []
    has_transform = False
    for path, node in n.walk(expr):
        if isinstance(node, n.Column) and node.name not in allowed:
            out.append(Violation("column", f"column {node.name!r} is not an approved point-in-time column", path))
        if isinstance(node, n.TIME_SERIES + n.NONLINEAR):
            has_transform = True
        p = n.window_param(node)
        if p is not None and p < 1:
            out.append(Violation("window", f"{n.NAMES[type(node)]} parameter must be >= 1, got {p}", path))
        if isinstance(node, n.Clip) and not node.lo < node.hi:
            out.append(Violation("clip", f"clip bounds must satisfy lo < hi, got ({node.lo}, {node.hi})", path))
        if isinstance(node, n.LinComb) and not node.terms:
            out.append(Violation("arity", "lincomb needs at least one term", path))
    if not has_transform:
        out.append(Violation("transform", "recipe needs at least one time-series or nonlinear transformation"))
    d = n.depth(expr)
    if d > max_depth:
        out.append(Violation("depth", f"tree depth {d} exceeds max_depth {max_depth}"))
    return ValidationReport(tuple(out))
