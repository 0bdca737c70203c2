"""Row predicates: column comparisons combined with AND/OR.

Textual form, e.g. ``year >= 2010 AND (airport = "EWR" OR airport = "JFK")``.
AND binds tighter than OR; string literals use single or double quotes.
Categorical columns support only ``=``/``!=`` against string literals.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DataError, SchemaError
from .tables import ColumnKind, UnitTable, ID_PSEUDO_COLUMN


@dataclass(frozen=True)
class Comparison:
    column: str
    op: str  # one of = != < <= > >=
    value: Union[float, str]


@dataclass(frozen=True)
class And:
    parts: tuple


@dataclass(frozen=True)
class Or:
    parts: tuple


Predicate = Union[Comparison, And, Or]

ALWAYS_TRUE = And(())

_OPS = ("<=", ">=", "!=", "==", "=", "<", ">")

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<lparen>\() |
        (?P<rparen>\)) |
        (?P<op><=|>=|!=|==|=|<|>) |
        (?P<number>-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?) |
        (?P<string>"[^"]*"|'[^']*') |
        (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    )""",
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise DataError(f"predicate syntax error at {text[pos:pos + 20]!r}")
        pos = m.end()
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "word" and value.upper() in ("AND", "OR"):
            tokens.append((value.upper(), value))
        else:
            tokens.append((kind, value))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def advance(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def parse(self) -> Predicate:
        pred = self.or_expr()
        if self.pos != len(self.tokens):
            raise DataError(f"predicate has trailing tokens near {self.peek()[1]!r}")
        return pred

    def or_expr(self) -> Predicate:
        parts = [self.and_expr()]
        while self.peek()[0] == "OR":
            self.advance()
            parts.append(self.and_expr())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def and_expr(self) -> Predicate:
        parts = [self.atom()]
        while self.peek()[0] == "AND":
            self.advance()
            parts.append(self.atom())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def atom(self) -> Predicate:
        kind, value = self.advance()
        if kind == "lparen":
            inner = self.or_expr()
            kind, _ = self.advance()
            if kind != "rparen":
                raise DataError("predicate is missing a closing parenthesis")
            return inner
        if kind != "word":
            raise DataError(f"expected a column name, got {value!r}")
        column = value
        kind, op = self.advance()
        if kind != "op":
            raise DataError(f"expected a comparison operator after {column!r}")
        if op == "==":
            op = "="
        kind, literal = self.advance()
        if kind == "number":
            return Comparison(column, op, float(literal))
        if kind == "string":
            return Comparison(column, op, literal[1:-1])
        raise DataError(f"expected a literal after {column} {op}, got {literal!r}")


def parse_predicate(text: str) -> Predicate:
    text = text.strip()
    if not text:
        return ALWAYS_TRUE
    return _Parser(_tokenize(text)).parse()


def predicate_columns(pred: Predicate) -> set[str]:
    if isinstance(pred, Comparison):
        return {pred.column}
    cols: set[str] = set()
    for part in pred.parts:
        cols |= predicate_columns(part)
    return cols


def _compare(values: np.ndarray, op: str, rhs) -> np.ndarray:
    if op == "=":
        return values == rhs
    if op == "!=":
        return values != rhs
    if op == "<":
        return values < rhs
    if op == "<=":
        return values <= rhs
    if op == ">":
        return values > rhs
    return values >= rhs


def predicate_mask(table: UnitTable, pred: Predicate) -> np.ndarray:
    """Vectorized evaluation to a boolean row mask."""
    if isinstance(pred, And):
        mask = np.ones(table.n_rows, dtype=bool)
        for part in pred.parts:
            mask &= predicate_mask(table, part)
        return mask
    if isinstance(pred, Or):
        mask = np.zeros(table.n_rows, dtype=bool)
        for part in pred.parts:
            mask |= predicate_mask(table, part)
        return mask

    if not table.has_column(pred.column):
        raise SchemaError(f"predicate references unknown column {pred.column!r}")
    if pred.column == ID_PSEUDO_COLUMN and pred.column not in table.columns:
        if not isinstance(pred.value, float):
            raise DataError("id comparisons require a numeric literal")
        return _compare(table.ids.astype(np.float64), pred.op, pred.value)

    col = table.column(pred.column)
    if col.kind is ColumnKind.CATEGORICAL:
        if not isinstance(pred.value, str):
            raise DataError(
                f"column {pred.column!r} is categorical; compare against a string"
            )
        if pred.op not in ("=", "!="):
            raise DataError(
                f"categorical column {pred.column!r} supports only = and !="
            )
        try:
            code = col.labels.index(pred.value)
        except ValueError:
            # Unknown label: matches nothing (or everything, for !=).
            full = pred.op == "!="
            return np.full(table.n_rows, full, dtype=bool)
        return _compare(col.values, pred.op, code)

    if isinstance(pred.value, str):
        raise DataError(
            f"column {pred.column!r} is {col.kind.value}; compare against a number"
        )
    return _compare(col.values.astype(np.float64), pred.op, pred.value)
