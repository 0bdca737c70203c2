"""Config-driven pipelines: the one orchestration layer behind both the CLI
and the HTTP service.

Every run is deterministic given its config and inputs: no timestamps, no
randomness, fixed file layouts. Each pipeline writes its artifacts under an
output directory and also returns them as objects so in-process callers can
reuse the results without re-reading files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coarsen import CutpointSpec, coarse_name, coarsen, equal_width_cutpoints
from .config import AnalysisConfig, TreatmentSpec
from .errors import ConfigError, DataError, EstimationError
from .estimate import (
    BalanceReport,
    ate_matched,
    ate_subclass,
    balance_report,
    pairs_balance_awmd,
    raw_awmd,
    treated_share,
)
from .factoring import TreatmentSet
from .matching import (
    MatchedPairs,
    PropensityScoreDistance,
    nnm_with_replacement,
    nnm_without_replacement,
)
from .predicates import parse_predicate, predicate_mask
from .propensity import fit_logistic, save_model, score, trim
from .store import PreparedStore, load_store, prepare_database, query_prepared, save_store
from .subclass import SUBCLASS_COLUMN, SubclassifiedTable, cem, exact_match, subclassify_ps
from .tables import Column, ColumnKind, UnitTable, join, load_csv

MATCHED_FILE = "matched.csv"
RUN_LOG_FILE = "run_log.txt"
BALANCE_CSV = "balance.csv"
BALANCE_TXT = "balance.txt"
ATE_FILE = "ate.txt"
MODEL_FILE = "propensity_model.txt"
STORE_DIR = "store"


@dataclass
class RunLog:
    entries: list[tuple[str, int]] = field(default_factory=list)

    def add(self, stage: str, rows: int) -> None:
        self.entries.append((stage, int(rows)))

    def text(self) -> str:
        width = max((len(s) for s, _ in self.entries), default=0)
        return (
            "\n".join(f"{stage.ljust(width)}  {rows}" for stage, rows in self.entries)
            + "\n"
        )

    def write(self, path) -> None:
        Path(path).write_text(self.text(), encoding="utf-8")


def assemble_base(cfg: AnalysisConfig, log: RunLog) -> UnitTable:
    """Load inputs, chain the joins, and derive treatment columns.

    The first table is the fact side; each join attaches one parent. Rows a
    derived treatment classifies as neither treated nor control are dropped,
    and the treated-if/control-if predicates must be disjoint.
    """
    loaded: dict[str, UnitTable] = {}
    for spec in cfg.tables:
        table = load_csv(
            spec.path, spec.schema, id_column=spec.id_column, name=spec.name
        )
        loaded[spec.name] = table
        log.add(f"load:{spec.name}", table.n_rows)

    base = loaded[cfg.tables[0].name]
    for jspec in cfg.joins:
        if jspec.parent not in loaded:
            raise ConfigError([f"join parent {jspec.parent!r} was not loaded"])
        base = join(loaded[jspec.parent], base, jspec)
        log.add(f"join:{jspec.parent}", base.n_rows)

    for tspec in cfg.treatments:
        if tspec.derived:
            base = derive_treatment(base, tspec)
            log.add(f"derive:{tspec.name}", base.n_rows)

    return base.with_designations(
        treatments=[t.name for t in cfg.treatments], outcome=cfg.outcome
    )


def derive_treatment(table: UnitTable, tspec: TreatmentSpec) -> UnitTable:
    treated = predicate_mask(table, parse_predicate(tspec.treated_if))
    control = predicate_mask(table, parse_predicate(tspec.control_if))
    both = treated & control
    if np.any(both):
        first = int(table.ids[np.flatnonzero(both)[0]])
        raise DataError(
            f"treatment {tspec.name!r}: treated_if and control_if overlap "
            f"(first offending unit id {first})"
        )
    keep = treated | control
    values = treated[keep].astype(np.int64)
    return table.take(keep).with_columns({tspec.name: Column.binary(values)})


def resolve_cutpoints(cfg: AnalysisConfig, table: UnitTable) -> CutpointSpec:
    """Cutpoints for every covariate of every treatment. Unlisted covariates
    get identity coarsening (matched on exact value); `auto` entries become
    equal-width cutpoints measured on the assembled table."""
    wanted: list[str] = []
    for tspec in cfg.treatments:
        wanted.extend(c for c in tspec.covariates if c not in wanted)
    cuts: dict[str, tuple[float, ...]] = {}
    for cov in wanted:
        configured = cfg.cutpoints.get(cov)
        if configured is None:
            cuts[cov] = ()
        elif isinstance(configured, tuple) and configured and configured[0] == "auto":
            auto = equal_width_cutpoints(table, cov, configured[1])
            cuts[cov] = auto.cutpoints[cov]
        else:
            cuts[cov] = tuple(configured)
    return CutpointSpec(cuts)


@dataclass
class MatchResult:
    method: str
    table: UnitTable  # assembled (and possibly scored/trimmed) input
    subclassified: SubclassifiedTable | None
    pairs: MatchedPairs | None
    log: RunLog
    output_files: list[str] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        if self.subclassified is not None:
            return self.subclassified.n_rows
        return 0 if self.pairs is None else len(self.pairs)

    def counts(self) -> tuple[int, int]:
        """(treated, control) among matched units."""
        if self.subclassified is not None:
            return self.subclassified.counts()
        if self.pairs is None or len(self.pairs) == 0:
            return (0, 0)
        return (
            len(np.unique(self.pairs.treated_ids)),
            len(np.unique(self.pairs.control_ids)),
        )


def run_match(
    cfg: AnalysisConfig, out_dir, *, threads: int = 1
) -> MatchResult:
    """Ingestion through matching; writes matched.csv and run_log.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog()
    tspec = cfg.treatment()
    base = assemble_base(cfg, log)
    method = cfg.method.kind

    subclassified: SubclassifiedTable | None = None
    pairs: MatchedPairs | None = None
    files: list[str] = []
    work = base

    if method == "cem":
        work = coarsen(base, resolve_cutpoints(cfg, base))
        log.add("coarsen", work.n_rows)
        coarse_cols = [coarse_name(c) for c in tspec.covariates]
        subclassified = cem(work, coarse_cols, tspec.name)
        log.add("match:cem", subclassified.n_rows)
    elif method == "exact":
        subclassified = exact_match(work, list(tspec.covariates), tspec.name)
        log.add("match:exact", subclassified.n_rows)
    else:
        model = fit_logistic(work, tspec.name, list(tspec.covariates), cfg.fit)
        work = score(model, work)
        log.add("score", work.n_rows)
        save_model(model, out / MODEL_FILE)
        files.append(MODEL_FILE)
        if cfg.method.trim is not None:
            work = trim(work, *cfg.method.trim)
            log.add("trim", work.n_rows)
        if method == "ps_subclass":
            subclassified = subclassify_ps(work, cfg.method.n)
            log.add("match:ps_subclass", subclassified.n_rows)
        elif method == "nnmwr":
            pairs = nnm_with_replacement(
                work,
                PropensityScoreDistance(),
                cfg.method.k,
                cfg.method.caliper,
                treatment=tspec.name,
                threads=threads,
            )
            log.add("match:nnmwr", len(pairs))
        else:
            pairs = nnm_without_replacement(
                work,
                PropensityScoreDistance(),
                cfg.method.k,
                cfg.method.caliper,
                treatment=tspec.name,
                threads=threads,
            )
            log.add("match:nnmnr", len(pairs))

    if subclassified is not None:
        subclassified.to_csv(out / MATCHED_FILE)
    else:
        pairs.to_csv(out / MATCHED_FILE)
    files.append(MATCHED_FILE)
    log.write(out / RUN_LOG_FILE)
    files.append(RUN_LOG_FILE)
    return MatchResult(
        method=method,
        table=work,
        subclassified=subclassified,
        pairs=pairs,
        log=log,
        output_files=files,
    )


def _matched_schema(cfg: AnalysisConfig) -> dict[str, ColumnKind]:
    """Schema a matched.csv may carry: assembled columns plus coarsened,
    propensity, and subclass columns."""
    schema = dict(cfg.all_columns())
    for tspec in cfg.treatments:
        for cov in tspec.covariates:
            schema[coarse_name(cov)] = ColumnKind.NUMERIC
    schema["ps"] = ColumnKind.NUMERIC
    schema[SUBCLASS_COLUMN] = ColumnKind.NUMERIC
    return schema


def load_matched(cfg: AnalysisConfig, path):
    """Load a matched.csv back: SubclassifiedTable or MatchedPairs depending
    on its header."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"matched file does not exist: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    if header[:2] == ["tID", "cID"]:
        t_ids, c_ids, dists, orders = [], [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for record in reader:
                t_ids.append(int(record[0]))
                c_ids.append(int(record[1]))
                dists.append(float(record[2]))
                orders.append(int(record[3]))
        return MatchedPairs(
            np.array(t_ids, dtype=np.int64),
            np.array(c_ids, dtype=np.int64),
            np.array(dists, dtype=np.float64),
            np.array(orders, dtype=np.int64),
        )
    if SUBCLASS_COLUMN not in header:
        raise DataError(
            f"{path} is neither a subclassified table nor a matched-pairs file"
        )
    full = _matched_schema(cfg)
    schema = {c: full[c] for c in header if c in full and c != "id"}
    table = load_csv(path, schema, name="matched")
    subclass = table.values(SUBCLASS_COLUMN).astype(np.int64)
    kept = {n: c for n, c in table.columns.items() if n != SUBCLASS_COLUMN}
    tspec = cfg.treatment()
    stripped = UnitTable(
        table.ids,
        kept,
        treatments=[tspec.name] if tspec.name in kept else [],
        outcome=cfg.outcome if cfg.outcome in kept else None,
    )
    return SubclassifiedTable(stripped, subclass, tspec.name)


@dataclass
class BalanceResult:
    report: BalanceReport
    output_files: list[str]


def _balance_covariates(tspec: TreatmentSpec, cfg: AnalysisConfig) -> list[str]:
    kinds = cfg.all_columns()
    usable = [c for c in tspec.covariates if kinds[c] is not ColumnKind.CATEGORICAL]
    if not usable:
        raise ConfigError(
            ["balance needs at least one numeric covariate (AWMD of labels is undefined)"]
        )
    return usable


def run_balance(cfg: AnalysisConfig, matched_path, out_dir) -> BalanceResult:
    """Before/after imbalance report for a finished matching run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog()
    tspec = cfg.treatment()
    raw = assemble_base(cfg, log)
    covariates = _balance_covariates(tspec, cfg)
    matched = load_matched(cfg, matched_path)
    if isinstance(matched, MatchedPairs):
        raw_vals = tuple(raw_awmd(raw, c, tspec.name) for c in covariates)
        matched_vals = tuple(pairs_balance_awmd(matched, raw, c) for c in covariates)
        raw_t = int(np.count_nonzero(raw.values(tspec.name) == 1))
        report = BalanceReport(
            covariates=tuple(covariates),
            raw_awmd=raw_vals,
            matched_awmd=matched_vals,
            raw_treated=raw_t,
            raw_control=raw.n_rows - raw_t,
            matched_treated=len(np.unique(matched.treated_ids)),
            matched_control=len(np.unique(matched.control_ids)),
        )
    else:
        report = balance_report(raw, matched, covariates)
    report.to_csv(out / BALANCE_CSV)
    (out / BALANCE_TXT).write_text(report.to_text(), encoding="utf-8")
    return BalanceResult(report, [BALANCE_CSV, BALANCE_TXT])


@dataclass
class AteResult:
    value: float
    normalized: bool
    output_files: list[str]


def run_ate(
    cfg: AnalysisConfig, matched_path, out_dir, *, normalized: bool = False
) -> AteResult:
    """Average treatment effect from a finished matching run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matched = load_matched(cfg, matched_path)
    if isinstance(matched, MatchedPairs):
        if len(matched) == 0:
            raise EstimationError("no overlap: the matched set is empty")
        log = RunLog()
        base = assemble_base(cfg, log)
        value = ate_matched(matched, base, cfg.outcome)
        if normalized:
            units = matched.matched_unit_ids()
            n_treated = len(np.unique(matched.treated_ids))
            value *= n_treated / len(units)
    else:
        if matched.n_rows == 0:
            raise EstimationError("no overlap: the matched set is empty")
        value = ate_subclass(matched, cfg.outcome)
        if normalized:
            value *= treated_share(matched)
    (out / ATE_FILE).write_text(
        f"ate\t{value!r}\nnormalized\t{int(normalized)}\n", encoding="utf-8"
    )
    return AteResult(value, normalized, [ATE_FILE])


@dataclass
class PrepareResult:
    store: PreparedStore
    store_dir: str
    objective: float
    log: RunLog
    output_files: list[str]


def build_treatment_set(cfg: AnalysisConfig) -> TreatmentSet:
    return TreatmentSet(
        tuple(t.name for t in cfg.treatments),
        {t.name: tuple(coarse_name(c) for c in t.covariates) for t in cfg.treatments},
    )


def run_prepare(cfg: AnalysisConfig, out_dir, *, threads: int = 1) -> PrepareResult:
    """Offline preparation: assemble, coarsen, bundle treatments, and write
    the prepared store to <out>/store."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog()
    base = assemble_base(cfg, log)
    spec = resolve_cutpoints(cfg, base)
    work = coarsen(base, spec)
    log.add("coarsen", work.n_rows)
    ts = build_treatment_set(cfg)
    store = prepare_database(work, ts, cfg.method.groups)
    for pg in store.groups:
        log.add(f"factor:group_{pg.index}", pg.table.n_rows)
    store_dir = out / STORE_DIR
    save_store(store, store_dir)
    log.write(out / RUN_LOG_FILE)
    return PrepareResult(
        store=store,
        store_dir=str(store_dir),
        objective=store.objective,
        log=log,
        output_files=[STORE_DIR, RUN_LOG_FILE],
    )


@dataclass
class QueryResult:
    subclassified: SubclassifiedTable
    output_files: list[str]


def run_query(
    store: PreparedStore | str,
    treatment: str,
    predicate: str | None,
    out_dir,
) -> QueryResult:
    """Answer one subpopulation causal query from a prepared store."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(store, PreparedStore):
        store = load_store(store)
    result = query_prepared(store, treatment, predicate or None)
    result.to_csv(out / MATCHED_FILE)
    return QueryResult(result, [MATCHED_FILE])
