"""Multi-treatment covariate factoring.

When several binary treatments share covariates and are correlated, one
pre-grouping on the shared covariates prunes rows for all of them at once:
a shared-covariate group that lacks overlap for every treatment in the
bundle can never contribute a subclass to any member's exact matching. The
treatments are bundled by maximizing the summed normalized pairwise |phi|
within groups, subject to each multi-treatment group actually sharing at
least one covariate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, EstimationError, SchemaError
from .grouping import group_rows
from .subclass import SubclassifiedTable, cem
from .tables import Column, ColumnKind, UnitTable

SUPERSUBCLASS_COLUMN = "supersubclass"

# Exhaustive partition search is exponential; above this many treatments the
# greedy agglomerative fallback takes over.
_EXHAUSTIVE_LIMIT = 10


def phi(table: UnitTable, t: str, t_other: str) -> float:
    """Phi coefficient of two binary columns (2x2 contingency correlation).

    0 means independence; +/-1 complete dependence. Undefined (an error)
    when any margin of the contingency table is empty.
    """
    for name in (t, t_other):
        if table.column(name).kind is not ColumnKind.BINARY:
            raise SchemaError(f"phi requires binary columns, {name!r} is not")
    a = table.values(t)
    b = table.values(t_other)
    n11 = int(np.sum((a == 1) & (b == 1)))
    n10 = int(np.sum((a == 0) & (b == 1)))
    n01 = int(np.sum((a == 1) & (b == 0)))
    n00 = int(np.sum((a == 0) & (b == 0)))
    row1, row0 = n11 + n10, n01 + n00
    col1, col0 = n11 + n01, n10 + n00
    if min(row1, row0, col1, col0) == 0:
        raise EstimationError(
            f"phi({t!r}, {t_other!r}) is undefined: a contingency margin is zero"
        )
    return (n11 * n00 - n10 * n01) / math.sqrt(
        float(row1) * float(row0) * float(col1) * float(col0)
    )


@dataclass(frozen=True)
class TreatmentSet:
    """Binary treatments with their per-treatment coarsened covariates."""

    treatments: tuple[str, ...]
    covariates: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        if len(set(self.treatments)) != len(self.treatments):
            raise SchemaError("treatment names must be distinct")
        covs = {t: tuple(self.covariates[t]) for t in self.treatments}
        for t, cs in covs.items():
            if not cs:
                raise SchemaError(f"treatment {t!r} has an empty covariate list")
        object.__setattr__(self, "covariates", covs)


@dataclass(frozen=True)
class TreatmentGroup:
    treatments: tuple[str, ...]
    shared: tuple[str, ...]
    union: tuple[str, ...]


@dataclass(frozen=True)
class FactoredPartition:
    groups: tuple[TreatmentGroup, ...]
    objective: float


def _shared_and_union(ts: TreatmentSet, members: Sequence[str]):
    first = ts.covariates[members[0]]
    shared = tuple(
        c for c in first if all(c in ts.covariates[m] for m in members[1:])
    )
    union: list[str] = []
    for m in members:
        union.extend(c for c in ts.covariates[m] if c not in union)
    return shared, tuple(union)


def _feasible(ts: TreatmentSet, members: Sequence[str]) -> bool:
    return len(members) == 1 or bool(_shared_and_union(ts, members)[0])


def _group_score(members: Sequence[str], index: Mapping[str, int], absphi: np.ndarray) -> float:
    if len(members) < 2:
        return 0.0
    total = 0.0
    for i, a in enumerate(members):
        for b in members[i + 1:]:
            total += absphi[index[a], index[b]]
    return total / len(members)


def _restricted_growth(k: int, blocks: int) -> Iterator[tuple[int, ...]]:
    """Canonical set-partition codes of k items with exactly `blocks` blocks,
    in lexicographic order."""
    code = [0] * k

    def rec(pos: int, used: int):
        if pos == k:
            if used == blocks:
                yield tuple(code)
            return
        remaining = k - pos
        for b in range(min(used, blocks - 1) + 1):
            new_used = used + (1 if b == used else 0)
            # Prune: later items must still be able to open enough blocks.
            if new_used + (remaining - 1) < blocks:
                continue
            code[pos] = b
            yield from rec(pos + 1, new_used)

    yield from rec(0, 0)


def _blocks_of(code: Sequence[int], items: Sequence[str]) -> list[list[str]]:
    blocks: dict[int, list[str]] = {}
    for item, b in zip(items, code):
        blocks.setdefault(b, []).append(item)
    return [blocks[b] for b in sorted(blocks)]


def partition_treatments(ts: TreatmentSet, table: UnitTable, n: int) -> FactoredPartition:
    """Pick the treatment bundling that maximizes summed normalized |phi|.

    Exhaustive over all partitions into n nonempty groups while the
    treatment count stays small; greedy agglomerative merging of the most
    correlated feasible pair otherwise. Ties go to the lexicographically
    smallest assignment.
    """
    k = len(ts.treatments)
    if not 1 <= n <= k:
        raise DataError(f"group count must be in 1..{k}, got {n}")
    index = {t: i for i, t in enumerate(ts.treatments)}
    absphi = np.zeros((k, k))
    for i, a in enumerate(ts.treatments):
        for j in range(i + 1, k):
            absphi[i, j] = absphi[j, i] = abs(phi(table, a, ts.treatments[j]))

    def build(groups_members: Sequence[Sequence[str]]) -> FactoredPartition:
        groups = []
        total = 0.0
        for members in groups_members:
            shared, union = _shared_and_union(ts, members)
            total += _group_score(members, index, absphi)
            groups.append(TreatmentGroup(tuple(members), shared, union))
        return FactoredPartition(tuple(groups), float(total))

    if k <= _EXHAUSTIVE_LIMIT:
        best: tuple[float, tuple[int, ...]] | None = None
        for code in _restricted_growth(k, n):
            members_list = _blocks_of(code, ts.treatments)
            if not all(_feasible(ts, m) for m in members_list):
                continue
            value = sum(_group_score(m, index, absphi) for m in members_list)
            if best is None or value > best[0] + 1e-15:
                best = (value, code)
        if best is None:
            raise DataError(
                f"no feasible partition of {list(ts.treatments)} into {n} groups: "
                "some bundle would share no covariates"
            )
        return build(_blocks_of(best[1], ts.treatments))

    # Greedy fallback: merge the most correlated feasible pair of groups.
    groups: list[list[str]] = [[t] for t in ts.treatments]
    while len(groups) > n:
        best_pair = None
        best_phi = -1.0
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                merged = groups[i] + groups[j]
                if not _feasible(ts, merged):
                    continue
                peak = max(
                    absphi[index[a], index[b]] for a in groups[i] for b in groups[j]
                )
                if peak > best_phi + 1e-15:
                    best_phi = peak
                    best_pair = (i, j)
        if best_pair is None:
            raise DataError(
                f"no feasible partition into {n} groups: greedy merging ran out "
                "of bundles with shared covariates"
            )
        i, j = best_pair
        groups[i] = groups[i] + groups[j]
        del groups[j]
    return build(groups)


def covariate_factor(
    table: UnitTable, treatments: Sequence[str], shared: Sequence[str]
) -> UnitTable:
    """Pre-group on the shared covariates; keep groups where at least one
    bundled treatment has overlap; label rows with a supersubclass id (the
    group's maximum unit id)."""
    if not shared:
        raise SchemaError("covariate factoring needs a non-empty shared covariate set")
    for t in treatments:
        if table.column(t).kind is not ColumnKind.BINARY:
            raise SchemaError(f"treatment column {t!r} must be binary")
    g = group_rows([table.values(c) for c in shared], table.n_rows)
    keep_group = np.zeros(g.n_groups, dtype=bool)
    for t in treatments:
        values = table.values(t)
        keep_group |= g.gmax(values) != g.gmin(values)
    labels = g.gmax(table.ids)
    keep_row = keep_group[g.gid]
    super_ids = labels[g.gid][keep_row]
    return table.take(keep_row).with_columns(
        {SUPERSUBCLASS_COLUMN: Column.numeric(super_ids.astype(np.float64))}
    )


def mcem(
    factored: UnitTable, treatment: str, extra: Sequence[str]
) -> SubclassifiedTable:
    """Exact matching for one treatment over a factored table: regroup by
    (supersubclass, remaining covariates). Equals direct exact matching on
    the treatment's full covariate set over the unfactored table."""
    if SUPERSUBCLASS_COLUMN not in factored.columns:
        raise SchemaError(
            "mcem expects covariate_factor output (missing supersubclass column)"
        )
    return cem(factored, [SUPERSUBCLASS_COLUMN, *extra], treatment)
