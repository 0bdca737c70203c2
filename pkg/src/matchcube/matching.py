"""Distance measures and k:1 nearest-neighbor matching under a caliper.

Two procedures are provided. With replacement (NNMWR): every treated unit
independently receives its k nearest admissible controls, so a control may
serve several treated units. Without replacement (NNMNR): all admissible
pairs are sorted ascending by (distance, treated id, control id) and accepted
greedily while each control is still unused and the treated unit holds fewer
than k matches; the greedy result is maximal and at least half the size of a
maximum-cardinality matching.

The caliper comparison is strict (<). Ties are broken on ids, which makes
both procedures invariant to input row order. Pair generation is quadratic
by necessity: all nearest neighbors are wanted, not just one query point.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DataError, SchemaError
from .grouping import group_rows
from .tables import ColumnKind, UnitTable, write_csv_rows, PS_COLUMN

_BLOCK_ROWS = 128


@dataclass(frozen=True)
class PropensityScoreDistance:
    """|ps_i - ps_j| over a fitted propensity column."""

    column: str = PS_COLUMN


@dataclass(frozen=True)
class MahalanobisDistance:
    """(x_i - x_j)' S^-1 (x_i - x_j); the squared form, reported as-is."""

    covariates: tuple[str, ...]
    inverse_covariance: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.inverse_covariance, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SchemaError("inverse covariance must be a square matrix")
        if m.shape[0] != len(self.covariates):
            raise SchemaError("inverse covariance size must match covariate count")
        if not np.allclose(m, m.T, atol=1e-10):
            raise SchemaError("inverse covariance must be symmetric")
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise SchemaError("inverse covariance must be positive definite") from None
        object.__setattr__(self, "inverse_covariance", m)


@dataclass(frozen=True)
class CoarsenedDistance:
    """0 when all coarsened columns agree, incomparable otherwise."""

    columns: tuple[str, ...]


DistanceSpec = Union[PropensityScoreDistance, MahalanobisDistance, CoarsenedDistance]


@dataclass
class MatchedPairs:
    """Rows of (treated id, control id, distance, 1-based order)."""

    treated_ids: np.ndarray
    control_ids: np.ndarray
    distances: np.ndarray
    orders: np.ndarray

    def __len__(self) -> int:
        return len(self.treated_ids)

    def __iter__(self):
        for i in range(len(self)):
            yield (
                int(self.treated_ids[i]),
                int(self.control_ids[i]),
                float(self.distances[i]),
                int(self.orders[i]),
            )

    @staticmethod
    def empty() -> "MatchedPairs":
        z = np.zeros(0, dtype=np.int64)
        return MatchedPairs(z, z.copy(), np.zeros(0, dtype=np.float64), z.copy())

    def matched_unit_ids(self) -> np.ndarray:
        """Distinct unit ids taking part in any pair (treated plus control)."""
        return np.unique(np.concatenate([self.treated_ids, self.control_ids]))

    def to_csv(self, path) -> None:
        write_csv_rows(
            path,
            ["tID", "cID", "distance", "order"],
            (
                (str(t), str(c), repr(float(d)), str(o))
                for t, c, d, o in self
            ),
        )


def mahalanobis(row_a: Mapping, row_b: Mapping, spec: MahalanobisDistance) -> float:
    try:
        xa = np.array([float(row_a[c]) for c in spec.covariates])
        xb = np.array([float(row_b[c]) for c in spec.covariates])
    except KeyError as missing:
        raise SchemaError(f"row is missing covariate {missing.args[0]!r}") from None
    d = xa - xb
    return float(d @ spec.inverse_covariance @ d)


def covariance_inverse(
    table: UnitTable, covariates: Sequence[str], ridge: float = 0.0
) -> np.ndarray:
    """Inverse of the (ridge-stabilized) sample covariance of the covariates."""
    if table.n_rows < 2:
        raise DataError("covariance needs at least two rows")
    cols = []
    for c in covariates:
        col = table.column(c)
        if col.kind is ColumnKind.CATEGORICAL:
            raise SchemaError(f"covariate {c!r} must be numeric for Mahalanobis distance")
        cols.append(col.values.astype(np.float64))
    x = np.column_stack(cols)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    cov = cov + ridge * np.eye(cov.shape[0])
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DataError(
            "covariance matrix is singular; add ridge or drop constant columns"
        ) from None
    inv = np.linalg.inv(cov)
    return (inv + inv.T) / 2.0


def _split_treated_control(table: UnitTable, treatment: str | None):
    if treatment is None:
        if len(table.treatments) != 1:
            raise SchemaError(
                "table must designate exactly one treatment, or pass treatment="
            )
        treatment = table.treatments[0]
    tcol = table.column(treatment)
    if tcol.kind is not ColumnKind.BINARY:
        raise SchemaError(f"treatment column {treatment!r} must be binary")
    t_rows = np.flatnonzero(tcol.values == 1)
    c_rows = np.flatnonzero(tcol.values == 0)
    return treatment, t_rows, c_rows


class _PairDistance:
    """Vectorized distances from blocks of treated rows to all controls."""

    def __init__(self, table: UnitTable, spec: DistanceSpec, t_rows, c_rows):
        self.spec = spec
        if isinstance(spec, PropensityScoreDistance):
            if spec.column not in table.columns:
                raise SchemaError(
                    f"propensity distance needs a {spec.column!r} column; score the table first"
                )
            ps = table.values(spec.column).astype(np.float64)
            self.t_ps = ps[t_rows]
            self.c_ps = ps[c_rows]
        elif isinstance(spec, MahalanobisDistance):
            x = np.column_stack(
                [table.values(c).astype(np.float64) for c in spec.covariates]
            )
            a = spec.inverse_covariance
            self.t_x = x[t_rows]
            self.c_x = x[c_rows]
            self.c_ax = self.c_x @ a
            self.c_quad = np.einsum("ij,ij->i", self.c_x, self.c_ax)
            self.t_ax = self.t_x @ a
            self.t_quad = np.einsum("ij,ij->i", self.t_x, self.t_ax)
        else:
            cell = group_rows(
                [table.values(c) for c in spec.columns], table.n_rows
            ).gid
            self.t_cell = cell[t_rows]
            self.c_cell = cell[c_rows]

    def block(self, sel: np.ndarray) -> np.ndarray:
        """Distance matrix for treated rows `sel` x all controls.

        Incomparable coarsened pairs come back as +inf, which the strict
        caliper comparison then excludes.
        """
        spec = self.spec
        if isinstance(spec, PropensityScoreDistance):
            return np.abs(self.t_ps[sel, None] - self.c_ps[None, :])
        if isinstance(spec, MahalanobisDistance):
            cross = self.t_ax[sel] @ self.c_x.T
            block = self.t_quad[sel, None] + self.c_quad[None, :] - 2.0 * cross
            return np.maximum(block, 0.0)
        same = self.t_cell[sel, None] == self.c_cell[None, :]
        return np.where(same, 0.0, np.inf)


def _validate_nnm_args(k: int, caliper: float) -> None:
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not caliper > 0:
        raise DataError(f"caliper must be > 0, got {caliper}")


def nnm_with_replacement(
    table: UnitTable,
    dist: DistanceSpec,
    k: int,
    caliper: float,
    *,
    treatment: str | None = None,
    threads: int = 1,
) -> MatchedPairs:
    """k nearest admissible controls per treated unit; controls may repeat.

    Per treated unit, matches are the k admissible controls smallest under
    (distance, control id); a treated unit with no admissible control simply
    emits nothing. Output rows are ordered by (treated id, order).
    """
    _validate_nnm_args(k, caliper)
    _, t_rows, c_rows = _split_treated_control(table, treatment)
    if len(t_rows) == 0 or len(c_rows) == 0:
        return MatchedPairs.empty()

    # Deterministic output order: treated units ascending by id.
    t_rows = t_rows[np.argsort(table.ids[t_rows], kind="stable")]
    t_ids = table.ids[t_rows]
    c_ids = table.ids[c_rows]
    pair = _PairDistance(table, dist, t_rows, c_rows)

    def run_block(start: int):
        sel = np.arange(start, min(start + _BLOCK_ROWS, len(t_rows)))
        dmat = pair.block(sel)
        out = []
        for local, ti in enumerate(sel):
            d = dmat[local]
            admissible = d < caliper
            m = int(np.count_nonzero(admissible))
            if m == 0:
                continue
            take = min(k, m)
            masked = np.where(admissible, d, np.inf)
            kth = np.partition(masked, take - 1)[take - 1]
            cand = np.flatnonzero(admissible & (d <= kth))
            ranked = cand[np.lexsort((c_ids[cand], d[cand]))][:take]
            out.append(
                (
                    np.full(take, t_ids[ti], dtype=np.int64),
                    c_ids[ranked],
                    d[ranked],
                    np.arange(1, take + 1, dtype=np.int64),
                )
            )
        return out

    starts = list(range(0, len(t_rows), _BLOCK_ROWS))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run_block, starts))
    else:
        chunks = [run_block(s) for s in starts]

    flat = [piece for chunk in chunks for piece in chunk]
    if not flat:
        return MatchedPairs.empty()
    return MatchedPairs(
        np.concatenate([p[0] for p in flat]),
        np.concatenate([p[1] for p in flat]),
        np.concatenate([p[2] for p in flat]),
        np.concatenate([p[3] for p in flat]),
    )


def nnm_without_replacement(
    table: UnitTable,
    dist: DistanceSpec,
    k: int,
    caliper: float,
    *,
    treatment: str | None = None,
    threads: int = 1,
) -> MatchedPairs:
    """Greedy one-to-one matching over globally sorted admissible pairs.

    Pairs are visited ascending by (distance, treated id, control id); a pair
    is accepted iff its control is unused and its treated unit has fewer than
    k matches. Every control appears at most once in the result.
    """
    _validate_nnm_args(k, caliper)
    _, t_rows, c_rows = _split_treated_control(table, treatment)
    if len(t_rows) == 0 or len(c_rows) == 0:
        return MatchedPairs.empty()

    t_ids = table.ids[t_rows]
    c_ids = table.ids[c_rows]
    pair = _PairDistance(table, dist, t_rows, c_rows)

    def collect_block(start: int):
        sel = np.arange(start, min(start + _BLOCK_ROWS, len(t_rows)))
        dmat = pair.block(sel)
        rows, cols = np.nonzero(dmat < caliper)
        return sel[rows], cols, dmat[rows, cols]

    starts = list(range(0, len(t_rows), _BLOCK_ROWS))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            found = list(pool.map(collect_block, starts))
    else:
        found = [collect_block(s) for s in starts]

    if not found or not any(len(f[0]) for f in found):
        return MatchedPairs.empty()
    ts = np.concatenate([f[0] for f in found])
    cs = np.concatenate([f[1] for f in found])
    ds = np.concatenate([f[2] for f in found])

    # The accept loop itself is sequential by nature; only the sort and the
    # pair generation above run in parallel.
    visit = np.lexsort((c_ids[cs], t_ids[ts], ds))
    control_used = np.zeros(len(c_rows), dtype=bool)
    match_count = np.zeros(len(t_rows), dtype=np.int64)
    acc_t: list[int] = []
    acc_c: list[int] = []
    acc_d: list[float] = []
    acc_o: list[int] = []
    remaining_controls = len(c_rows)
    ts_list = ts[visit]
    cs_list = cs[visit]
    ds_list = ds[visit]
    for i in range(len(visit)):
        ci = cs_list[i]
        if control_used[ci]:
            continue
        ti = ts_list[i]
        if match_count[ti] >= k:
            continue
        control_used[ci] = True
        match_count[ti] += 1
        acc_t.append(ti)
        acc_c.append(ci)
        acc_d.append(ds_list[i])
        acc_o.append(match_count[ti])
        remaining_controls -= 1
        if remaining_controls == 0:
            break

    if not acc_t:
        return MatchedPairs.empty()
    out_t = t_ids[np.array(acc_t)]
    out_c = c_ids[np.array(acc_c)]
    out_d = np.array(acc_d, dtype=np.float64)
    out_o = np.array(acc_o, dtype=np.int64)
    emit = np.lexsort((out_o, out_t))
    return MatchedPairs(out_t[emit], out_c[emit], out_d[emit], out_o[emit])
