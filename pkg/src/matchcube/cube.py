"""Partial data-cube over covariate subsets, reused across matchings.

A cuboid is one materialized group-by: the distinct value combinations of a
covariate subset, each carrying a row count, per-treatment min/max, and the
maximum unit id of the group. Those aggregates all compose, so a cuboid is
built from the smallest already-materialized strict superset rather than
rescanning the base table. Exact matching for a treatment then reduces to
reading its cuboid: groups whose treatment min and max differ are the
overlapping subclasses, and the per-row group index recovers the unit rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, SchemaError
from .grouping import group_rows
from .subclass import SubclassifiedTable
from .tables import ColumnKind, UnitTable


def canon_subset(columns: Sequence[str]) -> tuple[str, ...]:
    return tuple(sorted(set(columns)))


@dataclass
class Cuboid:
    columns: tuple[str, ...]
    keys: tuple[np.ndarray, ...]
    count: np.ndarray
    treat_min: dict[str, np.ndarray]
    treat_max: dict[str, np.ndarray]
    max_id: np.ndarray
    row_group: np.ndarray | None = None
    source: str = "base"

    @property
    def n_groups(self) -> int:
        return len(self.count)

    def key_column(self, name: str) -> np.ndarray:
        return self.keys[self.columns.index(name)]


@dataclass
class CuboidLattice:
    base: UnitTable
    treatments: tuple[str, ...]
    cuboids: dict[tuple[str, ...], Cuboid] = field(default_factory=dict)
    groupby_runs: int = 0  # instrumentation: grouping passes actually executed

    def cuboid(self, columns: Sequence[str]) -> Cuboid:
        key = canon_subset(columns)
        try:
            return self.cuboids[key]
        except KeyError:
            raise DataError(f"covariate subset {key} is not materialized") from None

    def has(self, columns: Sequence[str]) -> bool:
        return canon_subset(columns) in self.cuboids


def _from_base(lattice: CuboidLattice, cols: tuple[str, ...]) -> Cuboid:
    table = lattice.base
    g = group_rows([table.values(c) for c in cols], table.n_rows)
    lattice.groupby_runs += 1
    rep = g.rep_rows()
    return Cuboid(
        columns=cols,
        keys=tuple(table.values(c)[rep] for c in cols),
        count=g.counts(),
        treat_min={t: g.gmin(table.values(t)) for t in lattice.treatments},
        treat_max={t: g.gmax(table.values(t)) for t in lattice.treatments},
        max_id=g.gmax(table.ids),
        row_group=g.gid,
        source="base",
    )


def _from_ancestor(lattice: CuboidLattice, cols: tuple[str, ...], anc: Cuboid) -> Cuboid:
    g = group_rows([anc.key_column(c) for c in cols], anc.n_groups)
    lattice.groupby_runs += 1
    rep = g.rep_rows()
    return Cuboid(
        columns=cols,
        keys=tuple(anc.key_column(c)[rep] for c in cols),
        count=g.gsum(anc.count),
        treat_min={t: g.gmin(anc.treat_min[t]) for t in lattice.treatments},
        treat_max={t: g.gmax(anc.treat_max[t]) for t in lattice.treatments},
        max_id=g.gmax(anc.max_id),
        row_group=g.gid[anc.row_group] if anc.row_group is not None else None,
        source=",".join(anc.columns) or "<all>",
    )


def materialize_cuboids(
    table: UnitTable,
    subsets: Sequence[Sequence[str]],
    treatments: Sequence[str],
) -> CuboidLattice:
    """Materialize the requested covariate subsets, largest first, feeding
    each from the smallest strict superset already available."""
    for t in treatments:
        if table.column(t).kind is not ColumnKind.BINARY:
            raise SchemaError(f"treatment column {t!r} must be binary")
    lattice = CuboidLattice(base=table, treatments=tuple(treatments))
    ordered = sorted(
        {canon_subset(s) for s in subsets}, key=lambda s: (-len(s), s)
    )
    for cols in ordered:
        for c in cols:
            table.column(c)
        ancestors = [
            cub
            for key, cub in lattice.cuboids.items()
            if set(cols) < set(key)
        ]
        if ancestors:
            best = min(ancestors, key=lambda cub: cub.n_groups)
            lattice.cuboids[cols] = _from_ancestor(lattice, cols, best)
        else:
            lattice.cuboids[cols] = _from_base(lattice, cols)
    return lattice


def add_cuboid(lattice: CuboidLattice, columns: Sequence[str]) -> Cuboid:
    """Materialize one more subset into an existing lattice."""
    cols = canon_subset(columns)
    if cols in lattice.cuboids:
        return lattice.cuboids[cols]
    ancestors = [c for key, c in lattice.cuboids.items() if set(cols) < set(key)]
    if ancestors:
        cub = _from_ancestor(lattice, cols, min(ancestors, key=lambda c: c.n_groups))
    else:
        cub = _from_base(lattice, cols)
    lattice.cuboids[cols] = cub
    return cub


def _ensure_row_group(lattice: CuboidLattice, cuboid: Cuboid) -> np.ndarray:
    """Recompute the row->group map when it was not persisted.

    Grouping numbers groups in ascending key order, which is also the order
    cuboid rows are stored in, so the fresh gid aligns with the cuboid.
    """
    if cuboid.row_group is not None:
        return cuboid.row_group
    table = lattice.base
    g = group_rows([table.values(c) for c in cuboid.columns], table.n_rows)
    lattice.groupby_runs += 1
    if g.n_groups != cuboid.n_groups:
        raise DataError(
            f"cuboid over {cuboid.columns} does not match its base table "
            f"({g.n_groups} groups vs {cuboid.n_groups} stored)"
        )
    cuboid.row_group = g.gid
    return g.gid


def cem_from_cube(
    lattice: CuboidLattice,
    covariates: Sequence[str],
    treatment: str,
    table: UnitTable,
) -> SubclassifiedTable:
    """Exact matching answered from a materialized cuboid.

    The overlap decision is read off the cuboid's per-treatment min/max;
    unit rows are recovered by mapping each base row to its group.
    """
    if table.n_rows != lattice.base.n_rows or not np.array_equal(
        table.ids, lattice.base.ids
    ):
        raise SchemaError("table does not match the lattice's base table")
    cuboid = lattice.cuboid(covariates)
    if treatment not in cuboid.treat_min:
        raise SchemaError(
            f"treatment {treatment!r} has no aggregates in this lattice "
            f"(available: {list(cuboid.treat_min)})"
        )
    row_group = _ensure_row_group(lattice, cuboid)
    keep_group = cuboid.treat_max[treatment] != cuboid.treat_min[treatment]
    mask = keep_group[row_group]
    subclass = cuboid.max_id[row_group][mask]
    return SubclassifiedTable(table.take(mask), subclass, treatment)
