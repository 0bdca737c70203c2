"""Propensity model: fit, gradient correctness, scoring, trimming."""

import numpy as np
import pytest

from matchcube.errors import DataError, EstimationError, SchemaError
from matchcube.propensity import (
    FitConfig,
    LogisticModel,
    fit_logistic,
    load_model,
    loss_and_gradient,
    save_model,
    score,
    trim,
)

import synth
from oracles import finite_diff_gradient


def simple_table(n=40, seed=7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    z = rng.normal(size=n)
    p = 1 / (1 + np.exp(-(1.5 * x - 0.5 * z)))
    t = (rng.random(n) < p).astype(int)
    if t.sum() == 0:
        t[0] = 1
    if t.sum() == n:
        t[0] = 0
    return synth.units(
        range(n), numeric={"x": x, "z": z}, binary={"t": t}, treatments=["t"]
    )


class TestFit:
    def test_zero_iterations_gives_zero_model(self):
        t = simple_table()
        model = fit_logistic(t, "t", ["x", "z"], FitConfig(max_iterations=0))
        assert model.weights.tolist() == [0.0, 0.0]
        assert model.intercept == 0.0
        scored = score(model, t)
        assert np.all(scored.values("ps") == 0.5)

    def test_symmetric_1d_sign_and_intercept(self):
        # x in {-1, +1}, T = 1 iff x = +1: the optimum has positive weight
        # and, by symmetry, zero intercept. Cross-checked against a scalar
        # grid-search optimizer over the same regularized loss.
        x = np.array([-1.0, 1.0] * 10)
        t = (x > 0).astype(int)
        table = synth.units(
            range(len(x)), numeric={"x": x}, binary={"t": t}, treatments=["t"]
        )
        config = FitConfig(l2=0.5, max_iterations=400)
        model = fit_logistic(table, "t", ["x"], config)
        assert model.weights[0] > 0
        assert abs(model.intercept) < 1e-6

        design = ((x - x.mean()) / x.std()).reshape(-1, 1)
        grid = np.linspace(-3, 3, 241)
        best = min(
            ((float(loss_and_gradient(design, t.astype(float), np.array([w]), b, config.l2)[0]), w, b)
             for w in grid for b in grid),
            key=lambda item: item[0],
        )
        assert model.weights[0] == pytest.approx(best[1], abs=0.05)
        assert model.intercept == pytest.approx(best[2], abs=0.05)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(99)
        t = simple_table(n=30, seed=3)
        design = np.column_stack([t.values("x"), t.values("z")])
        design = (design - design.mean(axis=0)) / design.std(axis=0)
        target = t.values("t").astype(float)
        for _ in range(20):
            params = rng.normal(scale=1.5, size=3)

            def loss_at(p):
                return loss_and_gradient(design, target, p[:2], p[2], 1e-3)[0]

            _, gw, gb = loss_and_gradient(design, target, params[:2], params[2], 1e-3)
            analytic = np.append(gw, gb)
            numeric = finite_diff_gradient(loss_at, params)
            denom = np.maximum(np.abs(numeric), 1e-8)
            assert np.max(np.abs(analytic - numeric) / denom) < 1e-5

    def test_loss_non_increasing(self):
        model = fit_logistic(simple_table(), "t", ["x", "z"])
        history = np.array(model.loss_history)
        assert np.all(np.diff(history) <= 0)

    def test_all_treated_rejected(self):
        t = synth.units([1, 2], numeric={"x": [0.0, 1.0]}, binary={"t": [1, 1]})
        with pytest.raises(EstimationError, match="treated"):
            fit_logistic(t, "t", ["x"])

    def test_categorical_one_hot_drops_first_level(self):
        t = synth.units(
            [1, 2, 3, 4],
            categorical={"c": ["a", "b", "c", "a"]},
            binary={"t": [0, 1, 0, 1]},
        )
        model = fit_logistic(t, "t", ["c"], FitConfig(max_iterations=5))
        assert model.feature_names == ("c=b", "c=c")

    def test_rescaling_covariate_leaves_scores_unchanged(self):
        t = simple_table()
        config = FitConfig(max_iterations=300)
        m1 = fit_logistic(t, "t", ["x", "z"], config)
        ps1 = score(m1, t).values("ps")

        rescaled = synth.units(
            range(t.n_rows),
            numeric={"x": -0.5 * t.values("x") + 3.0, "z": t.values("z")},
            binary={"t": t.values("t")},
            treatments=["t"],
        )
        m2 = fit_logistic(rescaled, "t", ["x", "z"], config)
        ps2 = score(m2, rescaled).values("ps")
        assert np.max(np.abs(ps1 - ps2)) < 1e-6
        # Negative scale flips the standardized feature, so the weight flips.
        assert m1.weights[0] == pytest.approx(-m2.weights[0], rel=1e-6)


class TestScore:
    def test_negating_model_complements_scores(self):
        t = simple_table()
        model = fit_logistic(t, "t", ["x", "z"], FitConfig(max_iterations=50))
        flipped = LogisticModel(
            treatment=model.treatment,
            covariates=model.covariates,
            categorical_levels=model.categorical_levels,
            feature_names=model.feature_names,
            weights=-model.weights,
            intercept=-model.intercept,
            means=model.means,
            scales=model.scales,
        )
        ps = score(model, t).values("ps")
        ps_flipped = score(flipped, t).values("ps")
        assert np.allclose(ps_flipped, 1.0 - ps, atol=1e-12)

    def test_scores_stay_inside_open_interval(self):
        t = synth.units(
            [1, 2], numeric={"x": [-1e6, 1e6]}, binary={"t": [0, 1]}, treatments=["t"]
        )
        model = LogisticModel(
            treatment="t",
            covariates=("x",),
            categorical_levels={},
            feature_names=("x",),
            weights=np.array([50.0]),
            intercept=0.0,
            means=np.array([0.0]),
            scales=np.array([1.0]),
        )
        ps = score(model, t).values("ps")
        assert np.all(ps > 0.0) and np.all(ps < 1.0)

    def test_unseen_categorical_level_rejected(self):
        train = synth.units(
            [1, 2], categorical={"c": ["a", "b"]}, binary={"t": [0, 1]}
        )
        model = fit_logistic(train, "t", ["c"], FitConfig(max_iterations=2))
        fresh = synth.units([3], categorical={"c": ["zzz"]})
        with pytest.raises(DataError, match="unseen"):
            score(model, fresh)

    def test_kind_mismatch_between_fit_and_score_rejected(self):
        train = synth.units(
            [1, 2], numeric={"c": [0.0, 1.0]}, binary={"t": [0, 1]}
        )
        model = fit_logistic(train, "t", ["c"], FitConfig(max_iterations=2))
        fresh = synth.units([3], categorical={"c": ["a"]})
        with pytest.raises(SchemaError, match="numeric column"):
            score(model, fresh)

    def test_permutation_invariant(self, rng):
        t = simple_table()
        model = fit_logistic(t, "t", ["x", "z"], FitConfig(max_iterations=60))
        perm = rng.permutation(t.n_rows)
        shuffled = t.take(perm)
        ps = score(model, t).values("ps")
        ps_shuffled = score(model, shuffled).values("ps")
        assert np.array_equal(ps[perm], ps_shuffled)


class TestTrim:
    def scored(self, ps_values):
        return synth.units(
            range(len(ps_values)),
            numeric={"ps": ps_values},
            binary={"t": [i % 2 for i in range(len(ps_values))]},
        )

    def test_full_range_is_identity(self):
        t = self.scored([0.2, 0.8])
        assert trim(t, 0.0, 1.0).n_rows == 2

    def test_common_practice_bounds(self):
        t = self.scored([0.05, 0.5, 0.95])
        out = trim(t, 0.1, 0.9)
        assert out.ids.tolist() == [1]

    def test_empty_result_is_not_an_error(self):
        t = self.scored([0.05, 0.95])
        assert trim(t, 0.4, 0.6).n_rows == 0

    def test_missing_ps_column(self):
        t = synth.units([1], numeric={"x": [1.0]})
        with pytest.raises(SchemaError, match="ps"):
            trim(t, 0.1, 0.9)

    def test_bad_bounds(self):
        t = self.scored([0.5])
        with pytest.raises(DataError, match="bounds"):
            trim(t, 0.9, 0.1)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        t = synth.units(
            range(12),
            numeric={"x": np.linspace(-2, 2, 12)},
            categorical={"c": ["a", "b", "c"] * 4},
            binary={"t": [0, 1] * 6},
        )
        model = fit_logistic(t, "t", ["x", "c"], FitConfig(max_iterations=40))
        path = tmp_path / "model.txt"
        save_model(model, path)
        back = load_model(path)
        assert back.feature_names == model.feature_names
        assert back.weights.tolist() == model.weights.tolist()
        assert back.intercept == model.intercept
        assert back.means.tolist() == model.means.tolist()
        assert back.scales.tolist() == model.scales.tolist()
        assert back.categorical_levels == model.categorical_levels
        ps = score(model, t).values("ps")
        ps_back = score(back, t).values("ps")
        assert np.array_equal(ps, ps_back)
