"""Propensity model: regularized logistic regression, scoring, trimming.

The fitter is deliberately plain: full-batch gradient descent with a
backtracking (Armijo) line search, zero initialization, standardized
features, and a small always-on L2 penalty so separable data cannot push
weights to infinity. Everything is deterministic: the same table yields the
same model bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, EstimationError, SchemaError
from .tables import Column, ColumnKind, UnitTable, PS_COLUMN

# Scores are clamped inside the open interval so sigma never saturates to an
# exact 0 or 1 in float64.
_PS_EPS = 1e-12


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 1.0
    max_iterations: int = 500
    l2: float = 1e-6
    tolerance: float = 1e-8


@dataclass
class LogisticModel:
    """Fitted weights over expanded (one-hot) features, plus the
    standardization constants captured at fit time."""

    treatment: str
    covariates: tuple[str, ...]
    categorical_levels: dict[str, tuple[str, ...]]
    feature_names: tuple[str, ...]
    weights: np.ndarray
    intercept: float
    means: np.ndarray
    scales: np.ndarray
    converged: bool = False
    iterations: int = 0
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.feature_names):
            raise SchemaError("weight vector length must equal feature count")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.intercept):
            raise DataError("model weights must be finite")


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _expand_features(
    table: UnitTable,
    covariates: Sequence[str],
    categorical_levels: dict[str, tuple[str, ...]] | None = None,
):
    """Design matrix with one-hot categorical expansion (first level dropped).

    When ``categorical_levels`` is given (scoring against a fitted model),
    the fit-time level sets are reused and unseen labels are an error.
    """
    blocks: list[np.ndarray] = []
    names: list[str] = []
    levels_out: dict[str, tuple[str, ...]] = {}
    for cov in covariates:
        col = table.column(cov)
        if categorical_levels is not None:
            was_categorical = cov in categorical_levels
            if was_categorical != (col.kind is ColumnKind.CATEGORICAL):
                raise SchemaError(
                    f"column {cov!r} is {col.kind.value} but the model was fitted "
                    f"on a {'categorical' if was_categorical else 'numeric'} column"
                )
        if col.kind is ColumnKind.CATEGORICAL:
            if categorical_levels is None:
                levels = col.labels
            else:
                levels = categorical_levels[cov]
                seen = set(levels)
                unseen = [lab for lab in col.labels if lab not in seen]
                present = set(col.values.tolist())
                truly_unseen = [
                    lab for lab in unseen if col.labels.index(lab) in present
                ]
                if truly_unseen:
                    raise DataError(
                        f"column {cov!r} has level(s) {truly_unseen} unseen at fit time"
                    )
            levels_out[cov] = tuple(levels)
            decoded = col.decoded()
            for level in levels[1:]:
                blocks.append((decoded == level).astype(np.float64))
                names.append(f"{cov}={level}")
        else:
            blocks.append(col.values.astype(np.float64))
            names.append(cov)
    if blocks:
        design = np.column_stack(blocks)
    else:
        design = np.zeros((table.n_rows, 0))
    return design, tuple(names), levels_out


def loss_and_gradient(
    design: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray,
    intercept: float,
    l2: float,
):
    """Mean negative log-likelihood with an L2 penalty on the weights.

    Returns (loss, weight gradient, intercept gradient). The intercept is
    not penalized.
    """
    n = len(target)
    z = design @ weights + intercept
    # log(1 + e^z) - t*z, computed stably
    loss = float(np.mean(np.logaddexp(0.0, z) - target * z))
    loss += 0.5 * l2 * float(weights @ weights)
    p = sigmoid(z)
    residual = p - target
    grad_w = design.T @ residual / n + l2 * weights
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


def fit_logistic(
    table: UnitTable,
    treatment: str,
    covariates: Sequence[str],
    config: FitConfig = FitConfig(),
) -> LogisticModel:
    """Fit Pr(T=1 | X) by gradient descent on the regularized likelihood.

    Stops when the gradient max-norm drops below the tolerance or the
    iteration budget runs out. The line search halves the step until the
    Armijo condition holds, so the loss never increases.
    """
    tcol = table.column(treatment)
    if tcol.kind is not ColumnKind.BINARY:
        raise SchemaError(f"treatment column {treatment!r} must be binary")
    target = tcol.values.astype(np.float64)
    n_treated = int(target.sum())
    if n_treated == 0 or n_treated == len(target):
        raise EstimationError(
            f"cannot fit a propensity model: treatment {treatment!r} has "
            f"{n_treated} treated of {len(target)} rows"
        )

    raw, names, levels = _expand_features(table, covariates)
    if not np.all(np.isfinite(raw)):
        raise DataError("design matrix contains non-finite values")
    means = raw.mean(axis=0) if raw.size else np.zeros(raw.shape[1])
    stds = raw.std(axis=0) if raw.size else np.zeros(raw.shape[1])
    scales = np.where(stds > 0, stds, 1.0)
    design = (raw - means) / scales

    weights = np.zeros(raw.shape[1])
    intercept = 0.0
    loss, grad_w, grad_b = loss_and_gradient(design, target, weights, intercept, config.l2)
    history = [loss]
    iterations = 0
    converged = False
    for _ in range(config.max_iterations):
        gnorm = max(
            float(np.max(np.abs(grad_w))) if grad_w.size else 0.0,
            abs(grad_b),
        )
        if gnorm < config.tolerance:
            converged = True
            break
        step = config.learning_rate
        gsq = float(grad_w @ grad_w) + grad_b * grad_b
        for _ in range(60):
            cand_w = weights - step * grad_w
            cand_b = intercept - step * grad_b
            cand_loss, cand_gw, cand_gb = loss_and_gradient(
                design, target, cand_w, cand_b, config.l2
            )
            if cand_loss <= loss - 1e-4 * step * gsq:
                break
            step *= 0.5
        if cand_loss > loss:
            # Step underflow: no representable step decreases the loss.
            converged = True
            break
        weights, intercept = cand_w, cand_b
        loss, grad_w, grad_b = cand_loss, cand_gw, cand_gb
        history.append(loss)
        iterations += 1
    else:
        gnorm = max(
            float(np.max(np.abs(grad_w))) if grad_w.size else 0.0, abs(grad_b)
        )
        converged = gnorm < config.tolerance

    return LogisticModel(
        treatment=treatment,
        covariates=tuple(covariates),
        categorical_levels=levels,
        feature_names=names,
        weights=weights,
        intercept=float(intercept),
        means=means,
        scales=scales,
        converged=converged,
        iterations=iterations,
        loss_history=history,
    )


def score(model: LogisticModel, table: UnitTable) -> UnitTable:
    """Add a ``ps`` column: sigma(w.x + b) over standardized features.

    Scores stay strictly inside (0, 1); an existing ps column is replaced.
    """
    raw, _, _ = _expand_features(table, model.covariates, model.categorical_levels)
    design = (raw - model.means) / model.scales
    z = design @ model.weights + model.intercept
    ps = np.clip(sigmoid(z), _PS_EPS, 1.0 - _PS_EPS)
    return table.with_columns({PS_COLUMN: Column.numeric(ps)}, replace=True)


def trim(table: UnitTable, lo: float, hi: float) -> UnitTable:
    """Keep rows with lo <= ps <= hi (common-overlap trimming)."""
    if not (0.0 <= lo < hi <= 1.0):
        raise DataError(f"trim bounds must satisfy 0 <= lo < hi <= 1, got {lo}, {hi}")
    if PS_COLUMN not in table.columns:
        raise SchemaError("trim requires a ps column; score the table first")
    ps = table.values(PS_COLUMN)
    return table.take((ps >= lo) & (ps <= hi))


# -- model persistence ----------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_model(model: LogisticModel, path) -> None:
    """Human-readable key-value dump; floats carry 17 significant digits so
    the round trip is bit-exact."""
    lines = [
        f"treatment\t{model.treatment}",
        f"intercept\t{_fmt(model.intercept)}",
        f"converged\t{int(model.converged)}",
        f"iterations\t{model.iterations}",
    ]
    for cov in model.covariates:
        if cov in model.categorical_levels:
            levels = "\t".join(model.categorical_levels[cov])
            lines.append(f"covariate\t{cov}\tcategorical\t{levels}")
        else:
            lines.append(f"covariate\t{cov}\tnumeric")
    for i, fname in enumerate(model.feature_names):
        lines.append(
            "feature\t"
            + "\t".join(
                [fname, _fmt(model.weights[i]), _fmt(model.means[i]), _fmt(model.scales[i])]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> LogisticModel:
    treatment = ""
    intercept = 0.0
    converged = False
    iterations = 0
    covariates: list[str] = []
    levels: dict[str, tuple[str, ...]] = {}
    feature_names: list[str] = []
    weights: list[float] = []
    means: list[float] = []
    scales: list[float] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if not parts or not parts[0]:
                continue
            key = parts[0]
            if key == "treatment":
                treatment = parts[1]
            elif key == "intercept":
                intercept = float(parts[1])
            elif key == "converged":
                converged = bool(int(parts[1]))
            elif key == "iterations":
                iterations = int(parts[1])
            elif key == "covariate":
                covariates.append(parts[1])
                if parts[2] == "categorical":
                    levels[parts[1]] = tuple(parts[3:])
            elif key == "feature":
                feature_names.append(parts[1])
                weights.append(float(parts[2]))
                means.append(float(parts[3]))
                scales.append(float(parts[4]))
            else:
                raise DataError(f"unknown model file entry {key!r}")
    return LogisticModel(
        treatment=treatment,
        covariates=tuple(covariates),
        categorical_levels=levels,
        feature_names=tuple(feature_names),
        weights=np.array(weights, dtype=np.float64),
        intercept=intercept,
        means=np.array(means, dtype=np.float64),
        scales=np.array(scales, dtype=np.float64),
        converged=converged,
        iterations=iterations,
    )
