"""Coarsening of covariates ahead of exact matching.

Each numeric covariate is discretized against an ascending cutpoint list
``c1 < ... < c_{k-1}`` into buckets ``1..k``; bins are half-open ``[c_i,
c_{i+1})``, so a value equal to a cutpoint joins the upper bucket and the
bucket function is total and monotone. An empty cutpoint list means the
covariate is matched on its exact value, which is also how categorical
columns pass through. Coarsened columns are *added* (prefixed ``cx_``);
originals are retained because effect estimation runs on uncoarsened data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, SchemaError
from .grouping import group_rows
from .tables import Column, ColumnKind, UnitTable

COARSE_PREFIX = "cx_"


def coarse_name(covariate: str) -> str:
    return COARSE_PREFIX + covariate


class Incomparable:
    """Distance sentinel for units in different coarsened cells.

    Deliberately not a float: it must never take part in arithmetic.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INCOMPARABLE"


INCOMPARABLE = Incomparable()


@dataclass(frozen=True)
class CutpointSpec:
    """Ascending cutpoints per covariate. k-1 cutpoints define k buckets."""

    cutpoints: Mapping[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        normalized = {}
        for cov, cuts in dict(self.cutpoints).items():
            cuts = tuple(float(c) for c in cuts)
            if any(b <= a for a, b in zip(cuts, cuts[1:])):
                raise DataError(
                    f"cutpoints for {cov!r} must be strictly increasing: {cuts}"
                )
            normalized[cov] = cuts
        object.__setattr__(self, "cutpoints", normalized)

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(self.cutpoints)


def bucket_of(value: float, cuts: Sequence[float]) -> int:
    """Bucket index in 1..k: one plus the number of cutpoints <= value."""
    return 1 + int(np.searchsorted(np.asarray(cuts, dtype=np.float64), value, side="right"))


def coarsen(table: UnitTable, spec: CutpointSpec) -> UnitTable:
    """Add one coarsened column per covariate with a cutpoint entry.

    Numeric covariates are bucketed; categorical covariates (which must have
    an empty cutpoint list) carry their interned code; numeric covariates
    with an empty list keep their exact value.
    """
    added: dict[str, Column] = {}
    for cov, cuts in spec.cutpoints.items():
        col = table.column(cov)
        if col.kind is ColumnKind.CATEGORICAL:
            if cuts:
                raise SchemaError(
                    f"covariate {cov!r} is categorical; cutpoints only apply to numeric columns"
                )
            coarse = col.values.astype(np.float64)
        elif not cuts:
            coarse = col.values.astype(np.float64)
        else:
            edges = np.asarray(cuts, dtype=np.float64)
            coarse = (np.searchsorted(edges, col.values.astype(np.float64), side="right") + 1).astype(np.float64)
        added[coarse_name(cov)] = Column.numeric(coarse)
    return table.with_columns(added)


def equal_width_cutpoints(table: UnitTable, covariate: str, k: int) -> CutpointSpec:
    """k-1 cutpoints at min + i*(max-min)/k, i = 1..k-1."""
    if k < 1:
        raise DataError(f"bucket count must be >= 1, got {k}")
    col = table.column(covariate)
    if col.kind is not ColumnKind.NUMERIC:
        raise SchemaError(f"equal-width cutpoints need a numeric column, got {covariate!r}")
    if table.n_rows == 0:
        raise DataError(f"cannot derive cutpoints for {covariate!r} from an empty table")
    lo = float(col.values.min())
    hi = float(col.values.max())
    if k == 1:
        return CutpointSpec({covariate: ()})
    if lo == hi:
        raise DataError(
            f"column {covariate!r} is constant; {k} equal-width buckets would be empty"
        )
    width = (hi - lo) / k
    return CutpointSpec({covariate: tuple(lo + i * width for i in range(1, k))})


def coarsened_distance(row_a: Mapping, row_b: Mapping, columns: Sequence[str]):
    """0 if all coarsened values agree, else the incomparable sentinel."""
    for cname in columns:
        if cname not in row_a or cname not in row_b:
            raise SchemaError(f"row is missing coarsened column {cname!r}")
        if row_a[cname] != row_b[cname]:
            return INCOMPARABLE
    return 0.0


def coarsened_cell_ids(table: UnitTable, columns: Sequence[str]) -> np.ndarray:
    """Dense cell index per row; rows compare equal iff ids are equal."""
    return group_rows([table.values(c) for c in columns], table.n_rows).gid
