"""Columnar unit tables: typed columns, CSV ingestion, key joins, selection.

A :class:`UnitTable` is an immutable, in-memory columnar relation of units:
a unique integer id per row, named columns (numeric, categorical, or binary),
plus optional designations naming the treatment column(s) and the outcome
column. Every other part of the engine operates on these tables and returns
new ones; nothing mutates in place, so concurrent readers are always safe.

CSV conventions: comma separated, first line header, UTF-8, ``.`` decimal
separator. Missing or non-finite numeric cells are rejected at ingestion --
silently imputing values would corrupt downstream effect estimates.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, SchemaError

# Integer ids and integer-valued numeric columns (subclass labels) must stay
# exactly representable when they pass through float64 arithmetic.
_MAX_EXACT_INT = 2**53

PS_COLUMN = "ps"
ID_PSEUDO_COLUMN = "id"


class ColumnKind(enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    BINARY = "binary"

    @classmethod
    def parse(cls, text: str) -> "ColumnKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise SchemaError(
                f"unknown column kind {text!r}; expected one of "
                f"{[k.value for k in cls]}"
            ) from None


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class Column:
    """One typed column. Categorical labels are interned to dense int codes."""

    kind: ColumnKind
    values: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind is ColumnKind.NUMERIC:
            vals = np.ascontiguousarray(self.values, dtype=np.float64)
            if vals.size and not np.all(np.isfinite(vals)):
                raise DataError("numeric column contains non-finite values")
        elif self.kind is ColumnKind.BINARY:
            vals = np.ascontiguousarray(self.values, dtype=np.int64)
            if vals.size and not np.all((vals == 0) | (vals == 1)):
                raise DataError("binary column contains values other than 0 and 1")
        else:
            vals = np.ascontiguousarray(self.values, dtype=np.int64)
            if len(set(self.labels)) != len(self.labels):
                raise SchemaError("categorical labels must be distinct")
            if vals.size and (vals.min() < 0 or vals.max() >= len(self.labels)):
                raise SchemaError("categorical code outside label range")
        object.__setattr__(self, "values", _frozen(vals))

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def numeric(cls, values) -> "Column":
        return cls(ColumnKind.NUMERIC, np.array(values, dtype=np.float64))

    @classmethod
    def binary(cls, values) -> "Column":
        return cls(ColumnKind.BINARY, np.array(values, dtype=np.int64))

    @classmethod
    def categorical(cls, raw_labels: Iterable[str]) -> "Column":
        """Intern labels in first-appearance order (stable, deterministic)."""
        mapping: dict[str, int] = {}
        codes = []
        for lab in raw_labels:
            code = mapping.setdefault(lab, len(mapping))
            codes.append(code)
        return cls(
            ColumnKind.CATEGORICAL,
            np.array(codes, dtype=np.int64),
            tuple(mapping),
        )

    def decoded(self) -> np.ndarray:
        """Values with categorical codes replaced by their labels."""
        if self.kind is ColumnKind.CATEGORICAL:
            lut = np.array(self.labels, dtype=object)
            return lut[self.values] if len(self.values) else np.array([], dtype=object)
        return self.values

    def take(self, index: np.ndarray) -> "Column":
        return Column(self.kind, self.values[index], self.labels)

    def cell(self, i: int):
        if self.kind is ColumnKind.CATEGORICAL:
            return self.labels[int(self.values[i])]
        if self.kind is ColumnKind.BINARY:
            return int(self.values[i])
        return float(self.values[i])


class UnitTable:
    """Immutable columnar relation of units.

    Invariants enforced at construction: all columns share the row count, ids
    are unique, treatment designations point at binary columns, and a ``ps``
    column (when present) lies strictly inside (0, 1).
    """

    def __init__(
        self,
        ids,
        columns: Mapping[str, Column],
        *,
        treatments: Sequence[str] = (),
        outcome: str | None = None,
        name: str = "",
    ):
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.size and np.abs(ids).max() >= _MAX_EXACT_INT:
            raise DataError("unit ids must stay below 2**53")
        if len(np.unique(ids)) != len(ids):
            raise DataError("unit ids are not unique")
        self.ids = _frozen(ids)
        self.columns: dict[str, Column] = dict(columns)
        self.name = name
        for cname, col in self.columns.items():
            if len(col) != len(ids):
                raise SchemaError(
                    f"column {cname!r} has {len(col)} rows, expected {len(ids)}"
                )
        if PS_COLUMN in self.columns:
            ps = self.columns[PS_COLUMN]
            if ps.kind is not ColumnKind.NUMERIC:
                raise SchemaError("ps column must be numeric")
            if ps.values.size and not np.all((ps.values > 0.0) & (ps.values < 1.0)):
                raise DataError("ps values must lie strictly inside (0, 1)")
        self.treatments = tuple(treatments)
        for t in self.treatments:
            if t not in self.columns:
                raise SchemaError(f"treatment column {t!r} not present")
            if self.columns[t].kind is not ColumnKind.BINARY:
                raise SchemaError(f"treatment column {t!r} must be binary")
        if outcome is not None and outcome not in self.columns:
            raise SchemaError(f"outcome column {outcome!r} not present")
        self.outcome = outcome

    # -- introspection -------------------------------------------------

    @property
    def n_rows(self) -> int:
        return len(self.ids)

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(self.columns)

    def has_column(self, name: str) -> bool:
        return name in self.columns or name == ID_PSEUDO_COLUMN

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def kind(self, name: str) -> ColumnKind:
        return self.column(name).kind

    def values(self, name: str) -> np.ndarray:
        """Raw storage array: floats, binary ints, or categorical codes.

        ``"id"`` resolves to the unit ids.
        """
        if name == ID_PSEUDO_COLUMN and name not in self.columns:
            return self.ids
        return self.column(name).values

    def row(self, i: int) -> dict:
        out = {ID_PSEUDO_COLUMN: int(self.ids[i])}
        for cname, col in self.columns.items():
            out[cname] = col.cell(i)
        return out

    # -- derivation ----------------------------------------------------

    def take(self, index) -> "UnitTable":
        """Row subset by boolean mask or integer index array."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return UnitTable(
            self.ids[index],
            {n: c.take(index) for n, c in self.columns.items()},
            treatments=self.treatments,
            outcome=self.outcome,
            name=self.name,
        )

    def with_columns(self, extra: Mapping[str, Column], *, replace: bool = False) -> "UnitTable":
        merged = dict(self.columns)
        for cname, col in extra.items():
            if cname in merged and not replace:
                raise SchemaError(f"column {cname!r} already exists")
            merged[cname] = col
        return UnitTable(
            self.ids,
            merged,
            treatments=self.treatments,
            outcome=self.outcome,
            name=self.name,
        )

    def with_designations(
        self,
        *,
        treatments: Sequence[str] | None = None,
        outcome: str | None = None,
        name: str | None = None,
    ) -> "UnitTable":
        return UnitTable(
            self.ids,
            self.columns,
            treatments=self.treatments if treatments is None else treatments,
            outcome=self.outcome if outcome is None else outcome,
            name=self.name if name is None else name,
        )


def tables_equal(a: UnitTable, b: UnitTable) -> bool:
    """Semantic equality: ids, column names/kinds, and decoded values."""
    if a.column_names != b.column_names or not np.array_equal(a.ids, b.ids):
        return False
    for cname in a.column_names:
        ca, cb = a.column(cname), b.column(cname)
        if ca.kind is not cb.kind:
            return False
        if not np.array_equal(ca.decoded(), cb.decoded()):
            return False
    return True


# -- CSV ingestion and emission -----------------------------------------


def _parse_numeric(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(
            f"row {row}, column {column!r}: cannot parse {text!r} as a number"
        ) from None
    if not np.isfinite(value):
        raise DataError(
            f"row {row}, column {column!r}: non-finite value {text!r} rejected"
        )
    return value


def _parse_binary(text: str, row: int, column: str) -> int:
    stripped = text.strip()
    if stripped == "0":
        return 0
    if stripped == "1":
        return 1
    raise DataError(
        f"row {row}, column {column!r}: binary value must be 0 or 1, got {text!r}"
    )


def _parse_id(text: str, row: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(
            f"row {row}, column {column!r}: cannot parse {text!r} as an integer id"
        ) from None


def load_csv(
    path,
    schema: Mapping[str, ColumnKind],
    *,
    id_column: str = ID_PSEUDO_COLUMN,
    treatments: Sequence[str] = (),
    outcome: str | None = None,
    name: str = "",
) -> UnitTable:
    """Read a CSV file into a UnitTable.

    ``schema`` maps column names to kinds; the header must contain every
    schema column plus ``id_column``. Extra file columns are ignored. Row
    order is preserved, and errors report the offending data row (1-based)
    and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        position = {h: i for i, h in enumerate(header)}
        missing = [c for c in [id_column, *schema] if c not in position]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing} in header")

        ids: list[int] = []
        raw: dict[str, list] = {c: [] for c in schema}
        for row_no, record in enumerate(reader, start=1):
            if len(record) < len(header):
                raise DataError(
                    f"row {row_no}: expected {len(header)} fields, got {len(record)}"
                )
            ids.append(_parse_id(record[position[id_column]], row_no, id_column))
            for cname, kind in schema.items():
                cell = record[position[cname]]
                if kind is ColumnKind.NUMERIC:
                    raw[cname].append(_parse_numeric(cell, row_no, cname))
                elif kind is ColumnKind.BINARY:
                    raw[cname].append(_parse_binary(cell, row_no, cname))
                else:
                    raw[cname].append(cell)

    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[0] if len(ids) < 10_000 else None
        detail = f" (first duplicate: {dup})" if dup is not None else ""
        raise DataError(f"{path}: duplicate id values{detail}")

    columns: dict[str, Column] = {}
    for cname, kind in schema.items():
        if kind is ColumnKind.NUMERIC:
            columns[cname] = Column.numeric(raw[cname])
        elif kind is ColumnKind.BINARY:
            columns[cname] = Column.binary(raw[cname])
        else:
            columns[cname] = Column.categorical(raw[cname])
    return UnitTable(
        np.array(ids, dtype=np.int64),
        columns,
        treatments=treatments,
        outcome=outcome,
        name=name,
    )


def format_value(col: Column, i: int) -> str:
    """Format one cell for CSV emission. Floats round-trip exactly."""
    if col.kind is ColumnKind.CATEGORICAL:
        return col.labels[int(col.values[i])]
    if col.kind is ColumnKind.BINARY:
        return str(int(col.values[i]))
    v = float(col.values[i])
    if v.is_integer() and abs(v) < _MAX_EXACT_INT:
        return str(int(v))
    return repr(v)


def write_csv_rows(path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    """Low-level deterministic CSV emission used by non-table artifacts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for record in rows:
            writer.writerow(list(record))


def write_csv(table: UnitTable, path, *, extra: Mapping[str, Sequence] | None = None) -> None:
    """Emit a table (id first, then columns in order, then any extras)."""
    extra = extra or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([ID_PSEUDO_COLUMN, *table.column_names, *extra])
        cols = [table.column(c) for c in table.column_names]
        for i in range(table.n_rows):
            record = [str(int(table.ids[i]))]
            record.extend(format_value(c, i) for c in cols)
            record.extend(str(values[i]) for values in extra.values())
            writer.writerow(record)


# -- joins ----------------------------------------------------------------


@dataclass(frozen=True)
class JoinSpec:
    """Many-to-one equi-join: each child row references at most one parent."""

    parent: str
    child: str
    parent_key: str
    child_key: str


def _key_array(table: UnitTable, column: str):
    """Key values in a joinable representation (floats or label strings)."""
    if column == ID_PSEUDO_COLUMN and column not in table.columns:
        return table.ids.astype(np.float64), ColumnKind.NUMERIC
    col = table.column(column)
    if col.kind is ColumnKind.CATEGORICAL:
        return col.decoded(), ColumnKind.CATEGORICAL
    return col.values.astype(np.float64), col.kind


def join(parent: UnitTable, child: UnitTable, spec: JoinSpec) -> UnitTable:
    """Inner equi-join; the result keeps the child's unit ids.

    Parent columns are appended to matching child rows; child rows whose
    foreign key has no parent are dropped. A duplicated parent key violates
    the many-to-one contract and is an error.
    """
    if spec.parent and parent.name and spec.parent != parent.name:
        raise SchemaError(
            f"join spec names parent {spec.parent!r} but table is {parent.name!r}"
        )
    pkeys, pkind = _key_array(parent, spec.parent_key)
    ckeys, ckind = _key_array(child, spec.child_key)
    if (pkind is ColumnKind.CATEGORICAL) != (ckind is ColumnKind.CATEGORICAL):
        raise SchemaError(
            f"join keys {spec.parent_key!r}/{spec.child_key!r} have incompatible kinds"
        )

    if pkind is ColumnKind.CATEGORICAL:
        lookup: dict = {}
        for idx, key in enumerate(pkeys):
            if key in lookup:
                raise DataError(f"duplicate parent key {key!r} in {spec.parent_key!r}")
            lookup[key] = idx
        match = np.array([lookup.get(k, -1) for k in ckeys], dtype=np.int64)
    else:
        order = np.argsort(pkeys, kind="stable")
        sorted_keys = pkeys[order]
        if sorted_keys.size > 1 and np.any(sorted_keys[1:] == sorted_keys[:-1]):
            dup = sorted_keys[:-1][sorted_keys[1:] == sorted_keys[:-1]][0]
            raise DataError(f"duplicate parent key {dup!r} in {spec.parent_key!r}")
        pos = np.searchsorted(sorted_keys, ckeys)
        pos = np.clip(pos, 0, max(len(sorted_keys) - 1, 0))
        hit = sorted_keys.size > 0
        found = (sorted_keys[pos] == ckeys) if hit else np.zeros(len(ckeys), bool)
        match = np.where(found, order[pos] if hit else -1, -1)

    keep = np.flatnonzero(match >= 0)
    parent_rows = match[keep]

    merged = {n: c.take(keep) for n, c in child.columns.items()}
    for cname, col in parent.columns.items():
        if cname == spec.parent_key:
            continue  # same values as the child's foreign key
        if cname in merged:
            raise SchemaError(f"join would duplicate column {cname!r}")
        merged[cname] = col.take(parent_rows)

    treatments = list(child.treatments)
    treatments += [t for t in parent.treatments if t not in treatments]
    return UnitTable(
        child.ids[keep],
        merged,
        treatments=treatments,
        outcome=child.outcome or parent.outcome,
        name=child.name,
    )


def select(table: UnitTable, predicate) -> UnitTable:
    """Rows satisfying the predicate, order and ids preserved.

    ``predicate`` may be a predicate tree or its textual form (see
    :mod:`matchcube.predicates`).
    """
    from .predicates import parse_predicate, predicate_mask

    if isinstance(predicate, str):
        predicate = parse_predicate(predicate)
    return table.take(predicate_mask(table, predicate))
