"""Offline preparation of a database for repeated causal queries.

Preparation runs once: treatments are bundled by correlation, each bundle's
shared-covariate factoring is computed through a base-table cuboid and
materialized as a pruned table P, and a per-bundle cuboid lattice over the
bundle's covariates is built on P. Afterwards any member treatment's exact
matching — on the full population or any selected subpopulation — is
answered from the store without touching the original data.

On-disk layout: ``manifest.txt`` at the root, then one ``group_<i>/``
directory per bundle holding ``P.csv``, ``schema.txt``, and one
``cuboid_<hash>.csv`` per materialized covariate subset.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube import Cuboid, CuboidLattice, canon_subset, cem_from_cube, materialize_cuboids
from .errors import DataError, SchemaError
from .factoring import (
    SUPERSUBCLASS_COLUMN,
    TreatmentSet,
    partition_treatments,
)
from .grouping import group_rows
from .predicates import Predicate, parse_predicate, predicate_mask
from .subclass import SubclassifiedTable
from .tables import (
    Column,
    ColumnKind,
    UnitTable,
    format_value,
    load_csv,
    write_csv,
    write_csv_rows,
)

_MANIFEST = "manifest.txt"
_MAGIC = "matchcube-store"
_VERSION = "1"


def _subset_hash(columns) -> str:
    joined = "\x1f".join(columns)
    return hashlib.sha1(joined.encode("utf-8")).hexdigest()[:12]


@dataclass
class PreparedGroup:
    index: int
    treatments: tuple[str, ...]
    shared: tuple[str, ...]
    union: tuple[str, ...]
    table: UnitTable
    lattice: CuboidLattice


@dataclass
class PreparedStore:
    treatment_set: TreatmentSet
    objective: float
    groups: list[PreparedGroup]

    def group_for(self, treatment: str) -> PreparedGroup:
        for pg in self.groups:
            if treatment in pg.treatments:
                return pg
        available = [t for pg in self.groups for t in pg.treatments]
        raise SchemaError(
            f"unknown treatment {treatment!r}; store answers {available}"
        )

    def matched(self, treatment: str) -> SubclassifiedTable:
        """Full-population matched subset for one treatment."""
        pg = self.group_for(treatment)
        covs = self.treatment_set.covariates[treatment]
        result = cem_from_cube(pg.lattice, covs, treatment, pg.table)
        # The factoring label is store plumbing; matched output mirrors a
        # direct matching over the unfactored table.
        cleaned = {
            n: c
            for n, c in result.table.columns.items()
            if n != SUPERSUBCLASS_COLUMN
        }
        stripped = UnitTable(
            result.table.ids,
            cleaned,
            treatments=[t for t in result.table.treatments],
            outcome=result.table.outcome,
            name=result.table.name,
        )
        return SubclassifiedTable(stripped, result.subclass, treatment)


def prepare_database(table: UnitTable, ts: TreatmentSet, n: int) -> PreparedStore:
    """Run the full offline preparation; see the module docstring."""
    for t in ts.treatments:
        if table.column(t).kind is not ColumnKind.BINARY:
            raise SchemaError(f"treatment column {t!r} must be binary")
    partition = partition_treatments(ts, table, n)

    base_lattice = materialize_cuboids(
        table, [g.shared for g in partition.groups], ts.treatments
    )
    groups: list[PreparedGroup] = []
    for gi, grp in enumerate(partition.groups):
        cuboid = base_lattice.cuboid(grp.shared)
        keep_group = np.zeros(cuboid.n_groups, dtype=bool)
        for t in grp.treatments:
            keep_group |= cuboid.treat_max[t] != cuboid.treat_min[t]
        row_group = cuboid.row_group
        mask = keep_group[row_group]
        super_ids = cuboid.max_id[row_group][mask]
        pruned = table.take(mask).with_columns(
            {SUPERSUBCLASS_COLUMN: Column.numeric(super_ids.astype(np.float64))}
        )
        subsets = [grp.union] + [ts.covariates[t] for t in grp.treatments]
        lattice = materialize_cuboids(pruned, subsets, grp.treatments)
        groups.append(
            PreparedGroup(gi, grp.treatments, grp.shared, grp.union, pruned, lattice)
        )
    return PreparedStore(ts, partition.objective, groups)


def query_prepared(
    store: PreparedStore, treatment: str, predicate: Predicate | str | None = None
) -> SubclassifiedTable:
    """Matched subset for a subpopulation: full matching from the store,
    then the selection, then the overlap filter again (a selected subclass
    may have lost all its treated or all its control units)."""
    full = store.matched(treatment)
    if predicate is None:
        return full
    if isinstance(predicate, str):
        predicate = parse_predicate(predicate)
    mask = predicate_mask(full.table, predicate)
    selected = full.table.take(mask)
    labels = full.subclass[mask]
    g = group_rows([labels], selected.n_rows)
    t_values = selected.values(treatment)
    keep_group = g.gmax(t_values) != g.gmin(t_values)
    keep_row = keep_group[g.gid]
    return SubclassifiedTable(selected.take(keep_row), labels[keep_row], treatment)


# -- persistence -----------------------------------------------------------


def _check_manifest_safe(names) -> None:
    for name in names:
        if any(ch in name for ch in ",\t\n"):
            raise DataError(
                f"column name {name!r} cannot be persisted (contains a "
                "manifest separator character)"
            )


def save_store(store: PreparedStore, directory) -> None:
    _check_manifest_safe(store.treatment_set.treatments)
    for covs in store.treatment_set.covariates.values():
        _check_manifest_safe(covs)
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{_MAGIC}\t{_VERSION}",
        f"objective\t{float(store.objective)!r}",
        "treatments\t" + "\t".join(store.treatment_set.treatments),
    ]
    for t in store.treatment_set.treatments:
        lines.append(
            f"covariates\t{t}\t" + ",".join(store.treatment_set.covariates[t])
        )
    for pg in store.groups:
        lines.append(
            f"group\t{pg.index}\t"
            + ",".join(pg.treatments)
            + "\t"
            + ",".join(pg.shared)
            + "\t"
            + ",".join(pg.union)
        )
    for pg in store.groups:
        gdir = root / f"group_{pg.index}"
        gdir.mkdir(exist_ok=True)
        write_csv(pg.table, gdir / "P.csv")
        schema_lines = [
            f"column\t{name}\t{col.kind.value}" for name, col in pg.table.columns.items()
        ]
        if pg.table.outcome:
            schema_lines.append(f"outcome\t{pg.table.outcome}")
        (gdir / "schema.txt").write_text("\n".join(schema_lines) + "\n", encoding="utf-8")
        for subset, cuboid in sorted(pg.lattice.cuboids.items()):
            fname = f"cuboid_{_subset_hash(subset)}.csv"
            lines.append(f"cuboid\t{pg.index}\t" + ",".join(subset) + f"\t{fname}")
            _write_cuboid(pg.table, cuboid, gdir / fname)
    (root / _MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_cuboid(table: UnitTable, cuboid: Cuboid, path) -> None:
    header = [*cuboid.columns, "count"]
    for t in sorted(cuboid.treat_min):
        header += [f"min_{t}", f"max_{t}"]
    header.append("max_id")
    key_cols = [
        Column(table.column(c).kind, cuboid.key_column(c), table.column(c).labels)
        for c in cuboid.columns
    ]

    def rows():
        for i in range(cuboid.n_groups):
            record = [format_value(col, i) for col in key_cols]
            record.append(str(int(cuboid.count[i])))
            for t in sorted(cuboid.treat_min):
                record.append(str(int(cuboid.treat_min[t][i])))
                record.append(str(int(cuboid.treat_max[t][i])))
            record.append(str(int(cuboid.max_id[i])))
            yield record

    write_csv_rows(path, header, rows())


def _read_cuboid(table: UnitTable, subset: tuple[str, ...], treatments, path) -> Cuboid:
    import csv as _csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        pos = {h: i for i, h in enumerate(header)}
        raw_rows = list(reader)

    def floats(colname):
        idx = pos[colname]
        return np.array([float(r[idx]) for r in raw_rows], dtype=np.float64)

    keys = []
    for c in subset:
        kind = table.column(c).kind
        idx = pos[c]
        if kind is ColumnKind.CATEGORICAL:
            labels = table.column(c).labels
            lut = {lab: code for code, lab in enumerate(labels)}
            try:
                keys.append(
                    np.array([lut[r[idx]] for r in raw_rows], dtype=np.int64)
                )
            except KeyError as missing:
                raise DataError(
                    f"cuboid key {missing.args[0]!r} not present in table column {c!r}"
                ) from None
        elif kind is ColumnKind.BINARY:
            keys.append(np.array([int(r[idx]) for r in raw_rows], dtype=np.int64))
        else:
            keys.append(floats(c))
    return Cuboid(
        columns=subset,
        keys=tuple(keys),
        count=np.array([int(r[pos["count"]]) for r in raw_rows], dtype=np.int64),
        treat_min={t: floats(f"min_{t}").astype(np.int64) for t in treatments},
        treat_max={t: floats(f"max_{t}").astype(np.int64) for t in treatments},
        max_id=np.array([int(r[pos["max_id"]]) for r in raw_rows], dtype=np.int64),
        row_group=None,
        source="disk",
    )


def load_store(directory) -> PreparedStore:
    root = Path(directory)
    manifest = root / _MANIFEST
    if not manifest.exists():
        raise DataError(f"{root} is not a prepared store (no {_MANIFEST})")
    objective = 0.0
    treatments: tuple[str, ...] = ()
    covariates: dict[str, tuple[str, ...]] = {}
    group_lines: list[tuple[int, tuple[str, ...], tuple[str, ...], tuple[str, ...]]] = []
    cuboid_lines: list[tuple[int, tuple[str, ...], str]] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if not parts or not parts[0]:
            continue
        key = parts[0]
        if key == _MAGIC:
            if parts[1] != _VERSION:
                raise DataError(f"unsupported store version {parts[1]!r}")
        elif key == "objective":
            objective = float(parts[1])
        elif key == "treatments":
            treatments = tuple(parts[1:])
        elif key == "covariates":
            covariates[parts[1]] = tuple(parts[2].split(","))
        elif key == "group":
            gi = int(parts[1])
            members = tuple(parts[2].split(","))
            shared = tuple(s for s in parts[3].split(",") if s)
            union = tuple(s for s in parts[4].split(",") if s)
            group_lines.append((gi, members, shared, union))
        elif key == "cuboid":
            cuboid_lines.append(
                (int(parts[1]), tuple(parts[2].split(",")), parts[3])
            )
        else:
            raise DataError(f"unknown manifest entry {key!r}")

    ts = TreatmentSet(treatments, covariates)
    groups: list[PreparedGroup] = []
    for gi, members, shared, union in sorted(group_lines):
        gdir = root / f"group_{gi}"
        schema: dict[str, ColumnKind] = {}
        outcome = None
        for line in (gdir / "schema.txt").read_text(encoding="utf-8").splitlines():
            parts = line.split("\t")
            if parts[0] == "column":
                schema[parts[1]] = ColumnKind.parse(parts[2])
            elif parts[0] == "outcome":
                outcome = parts[1]
        table = load_csv(
            gdir / "P.csv",
            schema,
            treatments=[m for m in members if m in schema],
            outcome=outcome,
            name=f"group_{gi}",
        )
        lattice = CuboidLattice(base=table, treatments=members)
        for cgi, subset, fname in cuboid_lines:
            if cgi != gi:
                continue
            subset = canon_subset(subset)
            lattice.cuboids[subset] = _read_cuboid(table, subset, members, gdir / fname)
        groups.append(PreparedGroup(gi, members, shared, union, table, lattice))
    return PreparedStore(ts, objective, groups)
