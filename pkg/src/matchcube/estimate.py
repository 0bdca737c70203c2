"""Effect and balance estimators over matched output.

The subclass estimator averages within-subclass treated/control outcome
differences weighted by subclass share; the matched-pairs estimator is the
plain mean of per-pair differences. Imbalance is measured by the absolute
weighted mean difference (AWMD) of a covariate: the subclass-share-weighted
average of |treated mean - control mean|, evaluated on *raw* covariate
values even when matching ran on coarsened ones. All aggregation uses
numpy's pairwise summation in a fixed order, so results are reproducible
bit for bit.

No variance or confidence reporting here: sampling error is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, EstimationError, SchemaError
from .matching import MatchedPairs
from .subclass import SubclassifiedTable
from .tables import ColumnKind, UnitTable, write_csv_rows


def _group_means(s: SubclassifiedTable, values: np.ndarray):
    """Per-subclass (count, treated mean, control mean)."""
    g = s.grouping()
    t = s.table.values(s.treatment).astype(np.float64)
    counts = g.counts().astype(np.float64)
    n_treated = g.gsum(t)
    n_control = counts - n_treated
    sum_treated = g.gsum(values * t)
    sum_control = g.gsum(values) - sum_treated
    # Overlap invariant guarantees both denominators are positive.
    return counts, sum_treated / n_treated, sum_control / n_control


def _numeric_values(table: UnitTable, column: str) -> np.ndarray:
    col = table.column(column)
    if col.kind is ColumnKind.CATEGORICAL:
        raise SchemaError(f"column {column!r} must be numeric or binary")
    return col.values.astype(np.float64)


def ate_subclass(s: SubclassifiedTable, outcome: str) -> float:
    """Sum over subclasses of (n_b / N) * (treated mean - control mean)."""
    if s.n_rows == 0:
        raise EstimationError("no overlapping subclasses: cannot estimate an effect")
    y = _numeric_values(s.table, outcome)
    counts, mean_t, mean_c = _group_means(s, y)
    weights = counts / counts.sum()
    return float(np.sum(weights * (mean_t - mean_c)))


def ate_matched(pairs: MatchedPairs, table: UnitTable, outcome: str) -> float:
    """Mean outcome difference over pair rows; repeated controls count once
    per pair row."""
    if len(pairs) == 0:
        raise EstimationError("no matched pairs: cannot estimate an effect")
    if table.n_rows == 0:
        raise DataError("pair references unknown unit id: the table is empty")
    y = _numeric_values(table, outcome)
    order = np.argsort(table.ids, kind="stable")
    sorted_ids = table.ids[order]

    def resolve(ids: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(sorted_ids, ids)
        pos = np.clip(pos, 0, len(sorted_ids) - 1)
        bad = sorted_ids[pos] != ids
        if np.any(bad):
            raise DataError(f"pair references unknown unit id {int(ids[bad][0])}")
        return order[pos]

    y_t = y[resolve(pairs.treated_ids)]
    y_c = y[resolve(pairs.control_ids)]
    return float(np.mean(y_t - y_c))


def awmd(s: SubclassifiedTable, covariate: str) -> float:
    """Absolute weighted mean difference of a covariate across subclasses."""
    if s.n_rows == 0:
        raise EstimationError("no overlapping subclasses: AWMD undefined")
    x = _numeric_values(s.table, covariate)
    counts, mean_t, mean_c = _group_means(s, x)
    weights = counts / counts.sum()
    return float(np.sum(weights * np.abs(mean_t - mean_c)))


def raw_awmd(table: UnitTable, covariate: str, treatment: str) -> float:
    """AWMD treating the whole table as a single group (no balancing score
    exists before matching)."""
    x = _numeric_values(table, covariate)
    t = table.values(treatment)
    n_treated = int(np.count_nonzero(t == 1))
    if n_treated == 0 or n_treated == len(t):
        raise EstimationError(
            f"treatment {treatment!r} needs both values to measure imbalance"
        )
    return float(abs(np.mean(x[t == 1]) - np.mean(x[t == 0])))


def treated_share(s: SubclassifiedTable) -> float:
    """Retained-treated over retained-total; optional ATE normalizer."""
    treated, control = s.counts()
    return treated / (treated + control)


@dataclass
class BalanceReport:
    """Before/after imbalance per covariate plus retained-sample tallies."""

    covariates: tuple[str, ...]
    raw_awmd: tuple[float, ...]
    matched_awmd: tuple[float, ...]
    raw_treated: int
    raw_control: int
    matched_treated: int
    matched_control: int

    def rows(self):
        for i, cov in enumerate(self.covariates):
            yield cov, self.raw_awmd[i], self.matched_awmd[i]

    def to_csv(self, path) -> None:
        header = ["sample", "control", "treated", *self.covariates]
        write_csv_rows(
            path,
            header,
            [
                [
                    "raw",
                    str(self.raw_control),
                    str(self.raw_treated),
                    *(repr(v) for v in self.raw_awmd),
                ],
                [
                    "matched",
                    str(self.matched_control),
                    str(self.matched_treated),
                    *(repr(v) for v in self.matched_awmd),
                ],
            ],
        )

    def to_text(self) -> str:
        """Aligned table: one row per sample, one AWMD column per covariate."""
        header = ["sample", "control", "treated", *self.covariates]
        lines = [
            ["raw", str(self.raw_control), str(self.raw_treated)]
            + [f"{v:.6g}" for v in self.raw_awmd],
            ["matched", str(self.matched_control), str(self.matched_treated)]
            + [f"{v:.6g}" for v in self.matched_awmd],
        ]
        widths = [
            max(len(header[i]), *(len(row[i]) for row in lines))
            for i in range(len(header))
        ]
        def fmt(row):
            return "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
        return "\n".join([fmt(header), *(fmt(row) for row in lines)]) + "\n"


def balance_report(
    raw: UnitTable,
    matched: SubclassifiedTable,
    covariates: Sequence[str],
) -> BalanceReport:
    """Raw-side AWMD over the whole input versus subclass-weighted AWMD on
    the matched output, with treated/control tallies for both sides."""
    treatment = matched.treatment
    raw_t = raw.values(treatment)
    raw_treated = int(np.count_nonzero(raw_t == 1))
    raw_vals = tuple(raw_awmd(raw, c, treatment) for c in covariates)
    matched_vals = tuple(awmd(matched, c) for c in covariates)
    m_treated, m_control = matched.counts()
    return BalanceReport(
        covariates=tuple(covariates),
        raw_awmd=raw_vals,
        matched_awmd=matched_vals,
        raw_treated=raw_treated,
        raw_control=len(raw_t) - raw_treated,
        matched_treated=m_treated,
        matched_control=m_control,
    )


def pairs_balance_awmd(
    pairs: MatchedPairs, table: UnitTable, covariate: str
) -> float:
    """AWMD over matched pairs, grouping each treated unit with its matched
    controls (Table-style balance for nearest-neighbor output)."""
    if len(pairs) == 0:
        raise EstimationError("no matched pairs: AWMD undefined")
    x = _numeric_values(table, covariate)
    id_to_row = {int(uid): i for i, uid in enumerate(table.ids)}
    groups: dict[int, tuple[list[int], list[int]]] = {}
    for t, c, _, _ in pairs:
        try:
            t_row, c_row = id_to_row[t], id_to_row[c]
        except KeyError as missing:
            raise DataError(f"pair references unknown unit id {missing.args[0]}") from None
        bucket = groups.setdefault(t, ([], []))
        bucket[0].append(t_row)
        bucket[1].append(c_row)
    total = 0
    acc = 0.0
    for t_rows, c_rows in groups.values():
        size = 1 + len(c_rows)  # the treated unit plus its controls
        total += size
        acc += size * abs(float(x[t_rows[0]]) - float(np.mean(x[c_rows])))
    return acc / total
