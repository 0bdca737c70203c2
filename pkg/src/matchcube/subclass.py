"""Subclassification: PS quantile groups, coarsened/exact matching, pushdown.

All outputs satisfy the overlap invariant: every retained subclass holds at
least one treated and one control unit; groups failing it are discarded
wholesale. For the exact-grouping family (CEM, exact matching) the subclass
label is the maximum unit id in the group, which is stable under row
permutation and under splitting the computation across normalized relations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, EstimationError, SchemaError
from .grouping import Grouping, group_rows
from .tables import (
    ColumnKind,
    JoinSpec,
    UnitTable,
    join,
    write_csv,
    PS_COLUMN,
)

SUBCLASS_COLUMN = "subclass"


@dataclass
class SubclassifiedTable:
    """Units annotated with a subclass label; overlap holds per subclass."""

    table: UnitTable
    subclass: np.ndarray
    treatment: str

    def __post_init__(self):
        self.subclass = np.ascontiguousarray(self.subclass, dtype=np.int64)
        if len(self.subclass) != self.table.n_rows:
            raise SchemaError("subclass labels must cover every row")

    @property
    def n_rows(self) -> int:
        return self.table.n_rows

    def grouping(self) -> Grouping:
        return group_rows([self.subclass], self.n_rows)

    def n_subclasses(self) -> int:
        return len(np.unique(self.subclass)) if len(self.subclass) else 0

    def treated_mask(self) -> np.ndarray:
        return self.table.values(self.treatment) == 1

    def counts(self) -> tuple[int, int]:
        """(treated, control) tallies over retained units."""
        treated = int(np.count_nonzero(self.treated_mask()))
        return treated, self.n_rows - treated

    def retained_ids(self) -> np.ndarray:
        return np.sort(self.table.ids)

    def partition(self) -> dict[int, tuple[int, ...]]:
        """subclass label -> sorted unit ids, for equivalence checks."""
        out: dict[int, list[int]] = {}
        for uid, sc in zip(self.table.ids.tolist(), self.subclass.tolist()):
            out.setdefault(sc, []).append(uid)
        return {sc: tuple(sorted(ids)) for sc, ids in out.items()}

    def to_csv(self, path) -> None:
        write_csv(self.table, path, extra={SUBCLASS_COLUMN: self.subclass})


def _overlap_filter(
    table: UnitTable,
    grouping: Grouping,
    treatment_values: np.ndarray,
    labels_per_group: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Keep rows whose group has both treatment values; returns (mask, labels)."""
    gmax = grouping.gmax(treatment_values)
    gmin = grouping.gmin(treatment_values)
    keep_group = gmax != gmin
    keep_row = keep_group[grouping.gid]
    return keep_row, labels_per_group[grouping.gid][keep_row]


def cem(table: UnitTable, coarsened: Sequence[str], treatment: str) -> SubclassifiedTable:
    """Group by exact equality on the coarsened columns; keep overlapping
    groups; label each by its maximum unit id."""
    tcol = table.column(treatment)
    if tcol.kind is not ColumnKind.BINARY:
        raise SchemaError(f"treatment column {treatment!r} must be binary")
    for c in coarsened:
        table.column(c)
    g = group_rows([table.values(c) for c in coarsened], table.n_rows)
    labels = g.gmax(table.ids)
    keep_row, subclass = _overlap_filter(table, g, tcol.values, labels)
    return SubclassifiedTable(table.take(keep_row), subclass, treatment)


def exact_match(
    table: UnitTable, covariates: Sequence[str], treatment: str
) -> SubclassifiedTable:
    """CEM with identity coarsening: group on exact raw covariate values."""
    return cem(table, covariates, treatment)


def subclassify_ps(table: UnitTable, n: int) -> SubclassifiedTable:
    """Quantile subclassification on the propensity score (ntile semantics).

    Rows sorted by (ps, id) split into n contiguous groups whose sizes differ
    by at most one (earlier groups take the remainder); groups without both
    treatment values are discarded; labels are the group ordinals 1..n.
    """
    if PS_COLUMN not in table.columns:
        raise SchemaError("ps column missing; score the table before subclassifying")
    if n < 1:
        raise DataError(f"subclass count must be >= 1, got {n}")
    if n > table.n_rows:
        raise DataError(
            f"cannot split {table.n_rows} rows into {n} subclasses"
        )
    if len(table.treatments) != 1:
        raise SchemaError("table must designate exactly one treatment")
    treatment = table.treatments[0]

    ps = table.values(PS_COLUMN)
    order = np.lexsort((table.ids, ps))
    base, rem = divmod(table.n_rows, n)
    sizes = np.full(n, base, dtype=np.int64)
    sizes[:rem] += 1
    ordinal_sorted = np.repeat(np.arange(1, n + 1, dtype=np.int64), sizes)
    ordinal = np.empty(table.n_rows, dtype=np.int64)
    ordinal[order] = ordinal_sorted

    t = table.values(treatment)
    g = group_rows([ordinal], table.n_rows)
    group_label = g.gmax(ordinal)  # constant per group: the ordinal itself
    keep_row, subclass = _overlap_filter(table, g, t, group_label)
    return SubclassifiedTable(table.take(keep_row), subclass, treatment)


def cem_pushdown(
    relations: Sequence[UnitTable],
    joins: Sequence[JoinSpec],
    covariates_per_relation: Mapping[str, Sequence[str]],
    treatment: str,
    *,
    trace: list | None = None,
) -> SubclassifiedTable:
    """Interleave CEM with the join chain instead of joining first.

    Relations are consumed left to right; after each join the accumulated
    table is re-matched on all coarsened covariates seen so far. Groups a
    CEM pass discards can never regain overlap after further many-to-one
    joins, so the final retained units and subclass structure equal CEM on
    the fully joined table. ``trace`` (optional) collects (stage, rows)
    pairs so callers can observe how much each stage processed.
    """
    if not relations:
        raise DataError("cem_pushdown requires at least one relation")
    if len(joins) != len(relations) - 1:
        raise SchemaError(
            f"{len(relations)} relations need {len(relations) - 1} joins, got {len(joins)}"
        )

    def covs_for(rel: UnitTable) -> list[str]:
        try:
            return list(covariates_per_relation[rel.name])
        except KeyError:
            raise SchemaError(
                f"no covariates listed for relation {rel.name!r}"
            ) from None

    acc = relations[0]
    if treatment not in acc.columns:
        raise SchemaError(
            f"treatment {treatment!r} must live in the first relation {acc.name!r}"
        )
    seen = covs_for(acc)
    if trace is not None:
        trace.append((f"cem:{acc.name}", acc.n_rows))
    current = cem(acc, seen, treatment)
    for spec, parent in zip(joins, relations[1:]):
        if spec.parent and parent.name and spec.parent != parent.name:
            raise SchemaError(
                f"join spec parent {spec.parent!r} does not match relation {parent.name!r}"
            )
        if trace is not None:
            trace.append((f"join:{parent.name}", current.n_rows))
        joined = join(parent, current.table, spec)
        seen = seen + [c for c in covs_for(parent) if c not in seen]
        if trace is not None:
            trace.append((f"cem:{parent.name}", joined.n_rows))
        current = cem(joined, seen, treatment)
    return current


def pairs_to_subclasses(pairs, table: UnitTable, treatment: str | None = None) -> SubclassifiedTable:
    """View matched pairs as per-treated-unit subclasses.

    Valid only when every unit occurs in exactly one group (1:1 matching
    without replacement); reused controls would duplicate unit rows.
    """
    if treatment is None:
        if len(table.treatments) != 1:
            raise SchemaError("table must designate exactly one treatment")
        treatment = table.treatments[0]
    members: list[int] = []
    labels: list[int] = []
    for t, c, _, _ in pairs:
        members.extend((t, c))
        labels.extend((t, t))
    if not members:
        raise EstimationError("no matched pairs to subclassify")
    if len(set(members)) != len(members):
        raise DataError(
            "pairs reuse a unit; only 1:1 matching without replacement converts to subclasses"
        )
    id_to_row = {int(uid): i for i, uid in enumerate(table.ids)}
    try:
        rows = np.array([id_to_row[m] for m in members], dtype=np.int64)
    except KeyError as missing:
        raise DataError(f"pair references unknown unit id {missing.args[0]}") from None
    sub = UnitTable(
        table.ids[rows],
        {n: c.take(rows) for n, c in table.columns.items()},
        treatments=table.treatments,
        outcome=table.outcome,
        name=table.name,
    )
    return SubclassifiedTable(sub, np.array(labels, dtype=np.int64), treatment)
