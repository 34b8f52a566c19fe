"""Recursive-descent parser and canonical printer for recipe text.

Grammar (whitespace between tokens is ignored)::

    expr     = ident "(" arg { "," arg } ")" ;
    arg      = expr | number | ident ;
    number   = [ "+" | "-" ] ( digits [ "." [ digits ] ] | "." digits ) [ ( "e" | "E" ) [ "+" | "-" ] digits ] ;

Operator signatures are checked after the argument list is read, so arity
errors point at the operator rather than at whatever token came next.
"""
from __future__ import annotations

import math
import re

from ..errors import DslSyntaxError
from . import nodes as n

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),])
    """,
    re.VERBOSE,
)

_UNARY = {"cs_rank": n.CsRank, "cs_zscore": n.CsZscore, "log1p": n.Log1p, "abs": n.Abs}
_WINDOWED = {"lag": n.Lag, "roll_mean": n.RollMean, "roll_std": n.RollStd,
             "diff": n.Diff, "pct_change": n.PctChange}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind: str, value: str | None = None):
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            got = tok[1] or "end of input"
            raise DslSyntaxError(f"expected {want!r}, found {got!r}", tok[2])
        self.i += 1
        return tok

    def parse(self) -> n.Expr:
        e = self.call()
        tok = self.peek()
        if tok[0] != "eof":
            raise DslSyntaxError(f"trailing input {tok[1]!r}", tok[2])
        return e

    def arg(self):
        kind, value, off = self.peek()
        if kind == "number":
            self.i += 1
            return ("number", value, off)
        if kind == "ident":
            if self.tokens[self.i + 1][1] == "(":
                return ("expr", self.call(), off)
            self.i += 1
            return ("ident", value, off)
        raise DslSyntaxError(f"expected argument, found {value or 'end of input'!r}", off)

    def call(self) -> n.Expr:
        _, op, off = self.take("ident")
        if op not in n.OPERATORS:
            raise DslSyntaxError(f"unknown operator {op!r}", off)
        self.take("punct", "(")
        args = [self.arg()]
        while self.peek()[1] == ",":
            self.i += 1
            args.append(self.arg())
        self.take("punct", ")")
        return _build(op, args, off)


def _arity(op: str, expected: str, off: int):
    return DslSyntaxError(f"arity mismatch: {op} expects ({expected})", off)


def _number(arg, op: str, off: int, integer: bool = False):
    kind, value, aoff = arg
    if kind != "number":
        raise DslSyntaxError(f"{op}: expected a number", aoff)
    if integer:
        if not re.fullmatch(r"[+-]?\d+", value):
            raise DslSyntaxError(f"{op}: expected an integer, found {value!r}", aoff)
        return int(value)
    x = float(value)
    if not math.isfinite(x):
        raise DslSyntaxError(f"{op}: non-finite number {value!r}", aoff)
    return x


def _expr(arg, op: str):
    kind, value, aoff = arg
    if kind != "expr":
        raise DslSyntaxError(f"{op}: expected an expression", aoff)
    return value


def _build(op: str, args: list, off: int) -> n.Expr:
    if op == "col":
        if len(args) != 1:
            raise _arity(op, "name", off)
        kind, value, aoff = args[0]
        if kind != "ident":
            raise DslSyntaxError("col: expected a column name", aoff)
        return n.Column(value)
    if op in _UNARY:
        if len(args) != 1:
            raise _arity(op, "expr", off)
        return _UNARY[op](_expr(args[0], op))
    if op in _WINDOWED:
        if len(args) != 2:
            raise _arity(op, "int, expr", off)
        return _WINDOWED[op](_number(args[0], op, off, integer=True), _expr(args[1], op))
    if op == "clip":
        if len(args) != 3:
            raise _arity(op, "lo, hi, expr", off)
        return n.Clip(_number(args[0], op, off), _number(args[1], op, off), _expr(args[2], op))
    if op == "lincomb":
        if len(args) % 2:
            raise _arity(op, "weight, expr, ...", off)
        terms = tuple((_number(args[k], op, off), _expr(args[k + 1], op)) for k in range(0, len(args), 2))
        return n.LinComb(terms)
    raise DslSyntaxError(f"unknown operator {op!r}", off)  # pragma: no cover


def parse_recipe(text: str) -> n.Expr:
    """Parse recipe source such as ``cs_rank(roll_mean(10, col(range)))``."""
    return _Parser(text).parse()


def _num(x: float) -> str:
    return repr(float(x))


def canonical_form(e: n.Expr) -> str:
    """Single-line text that parses back to a structurally equal tree."""
    name = n.NAMES[type(e)]
    if isinstance(e, n.Column):
        return f"col({e.name})"
    if isinstance(e, n.LinComb):
        inner = ", ".join(f"{_num(w)}, {canonical_form(c)}" for w, c in e.terms)
        return f"lincomb({inner})"
    if isinstance(e, n.Clip):
        return f"clip({_num(e.lo)}, {_num(e.hi)}, {canonical_form(e.child)})"
    p = n.window_param(e)
    if p is not None:
        return f"{name}({int(p)}, {canonical_form(e.child)})"
    return f"{name}({canonical_form(e.child)})"
