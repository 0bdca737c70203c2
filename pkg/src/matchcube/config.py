"""Analysis configuration: one TOML file describing a whole pipeline.

Sections: ``[[tables]]`` (CSV inputs with schemas), ``[[joins]]`` (key /
foreign-key chains), ``[[treatments]]`` (an existing binary column, or a
treated-if/control-if derivation whose unmatched rows are discarded),
``[cutpoints]`` (per-covariate cutpoint lists or ``{auto = k}`` equal-width
requests), ``[method]`` and the outcome column. See the README for a full
annotated example.

Validation is exhaustive: every problem found is reported at once, before
any data is read.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, DataError
from .predicates import parse_predicate
from .propensity import FitConfig
from .tables import ColumnKind, JoinSpec, ID_PSEUDO_COLUMN

METHODS = ("cem", "exact", "nnmwr", "nnmnr", "ps_subclass")
NNM_METHODS = ("nnmwr", "nnmnr")

# Conventional defaults: five propensity subclasses remove most of the
# covariate imbalance in practice; two treatment bundles.
DEFAULT_SUBCLASSES = 5
DEFAULT_TREATMENT_GROUPS = 2


@dataclass(frozen=True)
class TableSpec:
    name: str
    path: Path
    schema: dict[str, ColumnKind]
    id_column: str = ID_PSEUDO_COLUMN


@dataclass(frozen=True)
class TreatmentSpec:
    """Either an existing binary column (`name`), or a derivation: rows
    matching treated_if become 1, control_if become 0, the rest are
    discarded."""

    name: str
    treated_if: str | None = None
    control_if: str | None = None
    covariates: tuple[str, ...] = ()

    @property
    def derived(self) -> bool:
        return self.treated_if is not None


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    k: int = 1
    caliper: float | None = None
    n: int = DEFAULT_SUBCLASSES
    trim: tuple[float, float] | None = None
    groups: int = DEFAULT_TREATMENT_GROUPS


@dataclass(frozen=True)
class AnalysisConfig:
    tables: tuple[TableSpec, ...]
    joins: tuple[JoinSpec, ...]
    treatments: tuple[TreatmentSpec, ...]
    cutpoints: dict[str, Any]  # covariate -> tuple of floats | ("auto", k)
    method: MethodSpec
    outcome: str
    fit: FitConfig = field(default_factory=FitConfig)

    def all_columns(self) -> dict[str, ColumnKind]:
        merged: dict[str, ColumnKind] = {}
        for t in self.tables:
            merged.update(t.schema)
        for t in self.treatments:
            if t.derived:
                merged[t.name] = ColumnKind.BINARY
        return merged

    def treatment(self, name: str | None = None) -> TreatmentSpec:
        if name is None:
            if len(self.treatments) != 1:
                raise ConfigError(
                    [
                        f"this command needs exactly one treatment, config has "
                        f"{len(self.treatments)}"
                    ]
                )
            return self.treatments[0]
        for t in self.treatments:
            if t.name == name:
                return t
        raise ConfigError([f"unknown treatment {name!r}"])


def load_config(path) -> AnalysisConfig:
    """Parse and validate a TOML config file. Paths resolve relative to it."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"config file is not valid TOML: {err}"]) from None
    return config_from_mapping(data, base_dir=path.parent)


def config_from_mapping(data: Mapping[str, Any], base_dir=None) -> AnalysisConfig:
    """Build and validate an AnalysisConfig from a parsed mapping (shared by
    the TOML loader, the service, and tests). Raises ConfigError carrying
    every problem found."""
    errors: list[str] = []
    base_dir = Path(base_dir) if base_dir is not None else None

    tables: list[TableSpec] = []
    raw_tables = data.get("tables", [])
    if not isinstance(raw_tables, list) or not raw_tables:
        errors.append("config needs at least one [[tables]] entry")
        raw_tables = []
    for i, entry in enumerate(raw_tables):
        label = entry.get("name") or f"tables[{i}]"
        name = entry.get("name", "")
        if not name:
            errors.append(f"tables[{i}]: missing name")
        raw_path = entry.get("path", "")
        if not raw_path:
            errors.append(f"{label}: missing path")
            file_path = Path("")
        else:
            file_path = Path(raw_path)
            if base_dir is not None and not file_path.is_absolute():
                file_path = base_dir / file_path
            if not file_path.exists():
                errors.append(f"{label}: input file does not exist: {file_path}")
        schema: dict[str, ColumnKind] = {}
        raw_schema = entry.get("schema", {})
        if not raw_schema:
            errors.append(f"{label}: missing schema")
        for cname, kind_text in raw_schema.items():
            try:
                schema[cname] = ColumnKind.parse(str(kind_text))
            except Exception as err:
                errors.append(f"{label}: column {cname!r}: {err}")
        tables.append(
            TableSpec(
                name=name,
                path=file_path,
                schema=schema,
                id_column=entry.get("id_column", ID_PSEUDO_COLUMN),
            )
        )
    table_names = [t.name for t in tables]
    if len(set(table_names)) != len(table_names):
        errors.append("table names must be unique")

    merged_schema: dict[str, ColumnKind] = {}
    for t in tables:
        merged_schema.update(t.schema)

    joins: list[JoinSpec] = []
    for i, entry in enumerate(data.get("joins", [])):
        spec = JoinSpec(
            parent=entry.get("parent", ""),
            child=entry.get("child", ""),
            parent_key=entry.get("parent_key", ""),
            child_key=entry.get("child_key", ""),
        )
        for side in ("parent", "child"):
            if getattr(spec, side) not in table_names:
                errors.append(
                    f"joins[{i}]: {side} table {getattr(spec, side)!r} is not declared"
                )
        for keyfield in ("parent_key", "child_key"):
            key = getattr(spec, keyfield)
            if not key:
                errors.append(f"joins[{i}]: missing {keyfield}")
            elif key != ID_PSEUDO_COLUMN and key not in merged_schema:
                errors.append(f"joins[{i}]: {keyfield} {key!r} not in any schema")
        joins.append(spec)

    treatments: list[TreatmentSpec] = []
    raw_treatments = data.get("treatments", [])
    if not raw_treatments:
        errors.append("config needs at least one [[treatments]] entry")
    for i, entry in enumerate(raw_treatments):
        name = entry.get("name", "")
        if not name:
            errors.append(f"treatments[{i}]: missing name")
        treated_if = entry.get("treated_if")
        control_if = entry.get("control_if")
        if (treated_if is None) != (control_if is None):
            errors.append(
                f"treatments[{i}] ({name}): treated_if and control_if go together"
            )
        if treated_if is None and name and name not in merged_schema:
            errors.append(
                f"treatments[{i}]: column {name!r} not in any schema "
                "(declare it, or derive it with treated_if/control_if)"
            )
        if treated_if is None and name in merged_schema:
            if merged_schema[name] is not ColumnKind.BINARY:
                errors.append(f"treatments[{i}]: column {name!r} must be binary")
        if treated_if is not None and name in merged_schema:
            errors.append(
                f"treatments[{i}]: derived treatment {name!r} collides with a schema column"
            )
        for label, text in (("treated_if", treated_if), ("control_if", control_if)):
            if text is not None:
                try:
                    parse_predicate(str(text))
                except DataError as err:
                    errors.append(f"treatments[{i}] ({name}).{label}: {err}")
        covariates = tuple(entry.get("covariates", ()))
        if not covariates:
            errors.append(f"treatments[{i}] ({name}): covariates must be non-empty")
        for cov in covariates:
            if cov not in merged_schema:
                errors.append(
                    f"treatments[{i}] ({name}): covariate {cov!r} not in any schema"
                )
        treatments.append(
            TreatmentSpec(
                name=name,
                treated_if=str(treated_if) if treated_if is not None else None,
                control_if=str(control_if) if control_if is not None else None,
                covariates=covariates,
            )
        )
    tnames = [t.name for t in treatments]
    if len(set(tnames)) != len(tnames):
        errors.append("treatment names must be unique")

    cutpoints: dict[str, Any] = {}
    for cov, value in data.get("cutpoints", {}).items():
        if cov not in merged_schema:
            errors.append(f"cutpoints: covariate {cov!r} not in any schema")
            continue
        if isinstance(value, Mapping):
            k = value.get("auto")
            if not isinstance(k, int) or k < 1:
                errors.append(
                    f"cutpoints.{cov}: auto bucket count must be a positive integer"
                )
            else:
                cutpoints[cov] = ("auto", k)
        elif isinstance(value, list):
            cuts = []
            ok = True
            for c in value:
                if not isinstance(c, (int, float)):
                    errors.append(f"cutpoints.{cov}: {c!r} is not a number")
                    ok = False
                    break
                cuts.append(float(c))
            if ok:
                if any(b <= a for a, b in zip(cuts, cuts[1:])):
                    errors.append(
                        f"cutpoints.{cov}: cutpoints must be strictly increasing"
                    )
                else:
                    cutpoints[cov] = tuple(cuts)
            if ok and merged_schema.get(cov) is not ColumnKind.NUMERIC and cuts:
                errors.append(
                    f"cutpoints.{cov}: cutpoints apply only to numeric columns"
                )
        else:
            errors.append(
                f"cutpoints.{cov}: expected a list of numbers or {{auto = k}}"
            )

    raw_method = data.get("method", {})
    kind = raw_method.get("kind", "")
    if kind not in METHODS:
        errors.append(f"method.kind: unknown method {kind!r}; expected one of {METHODS}")
    k = raw_method.get("k", 1)
    if not isinstance(k, int) or k < 1:
        errors.append("method.k: must be a positive integer")
        k = 1
    caliper = raw_method.get("caliper")
    if kind in NNM_METHODS and caliper is None:
        errors.append(f"method.caliper: required for {kind} (no default exists)")
    if caliper is not None and (not isinstance(caliper, (int, float)) or caliper <= 0):
        errors.append("method.caliper: must be a positive number")
        caliper = None
    n = raw_method.get("n", DEFAULT_SUBCLASSES)
    if not isinstance(n, int) or n < 1:
        errors.append("method.n: must be a positive integer")
        n = DEFAULT_SUBCLASSES
    trim = raw_method.get("trim")
    trim_tuple = None
    if trim is not None:
        if (
            not isinstance(trim, list)
            or len(trim) != 2
            or not all(isinstance(v, (int, float)) for v in trim)
            or not 0 <= trim[0] < trim[1] <= 1
        ):
            errors.append("method.trim: expected [lo, hi] with 0 <= lo < hi <= 1")
        else:
            trim_tuple = (float(trim[0]), float(trim[1]))
    groups = raw_method.get("groups", DEFAULT_TREATMENT_GROUPS)
    if not isinstance(groups, int) or groups < 1:
        errors.append("method.groups: must be a positive integer")
        groups = DEFAULT_TREATMENT_GROUPS

    outcome = data.get("outcome", "")
    if not outcome:
        errors.append("outcome: required")
    elif outcome not in merged_schema:
        errors.append(f"outcome: column {outcome!r} not in any schema")

    raw_fit = data.get("propensity", {})
    fit = FitConfig(
        learning_rate=float(raw_fit.get("learning_rate", 1.0)),
        max_iterations=int(raw_fit.get("max_iterations", 500)),
        l2=float(raw_fit.get("l2", 1e-6)),
        tolerance=float(raw_fit.get("tolerance", 1e-8)),
    )

    if errors:
        raise ConfigError(errors)
    return AnalysisConfig(
        tables=tuple(tables),
        joins=tuple(joins),
        treatments=tuple(treatments),
        cutpoints=cutpoints,
        method=MethodSpec(
            kind=kind,
            k=k,
            caliper=float(caliper) if caliper is not None else None,
            n=n,
            trim=trim_tuple,
            groups=groups,
        ),
        outcome=outcome,
        fit=fit,
    )
