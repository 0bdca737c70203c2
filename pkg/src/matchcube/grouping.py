"""Sort-based grouping shared by subclassification, factoring, and cubes.

Groups are numbered in ascending key order, so group ids are independent of
input row order. Aggregations run over contiguous sorted runs (reduceat),
which keeps floating-point reduction order fixed regardless of how the rows
arrived.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class Grouping:
    gid: np.ndarray     # per-row group index, 0..n_groups-1
    n_groups: int
    order: np.ndarray   # permutation sorting rows by group key
    starts: np.ndarray  # offsets into `order` where each group begins

    def counts(self) -> np.ndarray:
        if self.n_groups == 0:
            return np.zeros(0, dtype=np.int64)
        ends = np.append(self.starts[1:], len(self.order))
        return ends - self.starts

    def _reduce(self, ufunc, values: np.ndarray) -> np.ndarray:
        if self.n_groups == 0:
            return np.zeros(0, dtype=values.dtype)
        return ufunc.reduceat(values[self.order], self.starts)

    def gmax(self, values: np.ndarray) -> np.ndarray:
        return self._reduce(np.maximum, values)

    def gmin(self, values: np.ndarray) -> np.ndarray:
        return self._reduce(np.minimum, values)

    def gsum(self, values: np.ndarray) -> np.ndarray:
        return self._reduce(np.add, values)

    def rep_rows(self) -> np.ndarray:
        """One representative row index per group (first in key order)."""
        return self.order[self.starts]


def group_rows(columns: Sequence[np.ndarray], n_rows: int) -> Grouping:
    """Group rows by exact equality across all key columns.

    Zero key columns means a single all-rows group (the vacuous key).
    """
    if not columns:
        if n_rows == 0:
            return Grouping(np.zeros(0, np.int64), 0, np.zeros(0, np.int64), np.zeros(0, np.int64))
        return Grouping(
            np.zeros(n_rows, np.int64), 1, np.arange(n_rows), np.zeros(1, np.int64)
        )
    if n_rows == 0:
        return Grouping(np.zeros(0, np.int64), 0, np.zeros(0, np.int64), np.zeros(0, np.int64))

    codes = []
    cards = []
    for col in columns:
        uniq, inv = np.unique(np.asarray(col), return_inverse=True)
        codes.append(inv.astype(np.int64))
        cards.append(len(uniq))

    capacity = 1
    packable = True
    for card in cards:
        capacity *= max(card, 1)
        if capacity >= 2**62:
            packable = False
            break

    if packable:
        key = codes[0].copy()
        for code, card in zip(codes[1:], cards[1:]):
            key *= card
            key += code
        _, gid = np.unique(key, return_inverse=True)
        gid = gid.astype(np.int64)
    else:
        # Cardinality product too large to pack: fall back to lexsort.
        order = np.lexsort(codes[::-1])
        new_group = np.zeros(n_rows, dtype=bool)
        new_group[0] = True
        for code in codes:
            sorted_code = code[order]
            new_group[1:] |= sorted_code[1:] != sorted_code[:-1]
        gid_sorted = np.cumsum(new_group) - 1
        gid = np.empty(n_rows, dtype=np.int64)
        gid[order] = gid_sorted

    order = np.argsort(gid, kind="stable")
    gid_sorted = gid[order]
    starts = np.flatnonzero(np.append(True, gid_sorted[1:] != gid_sorted[:-1]))
    return Grouping(gid, len(starts), order, starts)
