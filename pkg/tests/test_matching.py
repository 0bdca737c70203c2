"""Nearest-neighbor matching: distances, caliper, tie-breaks, greedy bounds."""

import numpy as np
import pytest

from matchcube.errors import DataError, SchemaError
from matchcube.matching import (
    CoarsenedDistance,
    MahalanobisDistance,
    PropensityScoreDistance,
    covariance_inverse,
    mahalanobis,
    nnm_with_replacement,
    nnm_without_replacement,
)

import synth
from oracles import gauss_jordan_inverse, oracle_max_matching, oracle_nnmnr, oracle_nnmwr


def ps_table(treated: dict, controls: dict) -> synth.UnitTable:
    """Build a table from {id: ps} maps for treated and control units."""
    ids = list(treated) + list(controls)
    ps = list(treated.values()) + list(controls.values())
    t = [1] * len(treated) + [0] * len(controls)
    return synth.units(
        ids, numeric={"ps": ps}, binary={"t": t}, treatments=["t"]
    )


class TestMahalanobis:
    def test_identical_points(self):
        spec = MahalanobisDistance(("a", "b"), np.eye(2))
        assert mahalanobis({"a": 1, "b": 2}, {"a": 1, "b": 2}, spec) == 0.0

    def test_squared_euclidean_under_identity(self):
        spec = MahalanobisDistance(("a", "b"), np.eye(2))
        assert mahalanobis({"a": 0, "b": 0}, {"a": 3, "b": 4}, spec) == 25.0

    def test_diagonal_weighting(self):
        spec = MahalanobisDistance(("a", "b"), np.diag([4.0, 1.0]))
        assert mahalanobis({"a": 1, "b": 0}, {"a": 0, "b": 0}, spec) == 4.0

    def test_non_spd_rejected(self):
        with pytest.raises(SchemaError, match="positive definite"):
            MahalanobisDistance(("a",), np.array([[-1.0]]))

    def test_asymmetric_rejected(self):
        with pytest.raises(SchemaError, match="symmetric"):
            MahalanobisDistance(("a", "b"), np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestCovarianceInverse:
    def test_independent_unit_variance_close_to_identity(self):
        rng = np.random.default_rng(41)
        n = 20000
        t = synth.units(
            range(n),
            numeric={"a": rng.normal(size=n), "b": rng.normal(size=n)},
        )
        inv = covariance_inverse(t, ["a", "b"], ridge=0.0)
        # Exact agreement with an independent inversion of the same sample
        # covariance, and statistical agreement with the identity.
        cov = np.cov(
            np.column_stack([t.values("a"), t.values("b")]), rowvar=False, ddof=1
        )
        assert np.allclose(inv, gauss_jordan_inverse(cov), atol=1e-10)
        assert np.allclose(inv, np.eye(2), atol=0.05)

    def test_constant_column_with_ridge(self):
        t = synth.units(
            range(4), numeric={"a": [1.0, 1.0, 1.0, 1.0], "b": [1.0, 2.0, 3.0, 4.0]}
        )
        inv = covariance_inverse(t, ["a", "b"], ridge=1e-6)
        assert np.all(np.isfinite(inv))
        np.linalg.cholesky(inv)  # still positive definite

    def test_constant_column_without_ridge_rejected(self):
        t = synth.units(range(3), numeric={"a": [2.0, 2.0, 2.0]})
        with pytest.raises(DataError, match="singular"):
            covariance_inverse(t, ["a"], ridge=0.0)

    def test_single_covariate_scalar(self):
        t = synth.units(range(3), numeric={"a": [0.0, 2.0, 4.0]})
        ridge = 1e-3
        inv = covariance_inverse(t, ["a"], ridge=ridge)
        assert inv.shape == (1, 1)
        assert inv[0, 0] == pytest.approx(1.0 / (4.0 + ridge))


class TestNnmWithReplacement:
    def test_worked_example(self):
        t = ps_table({1: 0.50}, {101: 0.52, 102: 0.45, 103: 0.70})
        pairs = nnm_with_replacement(t, PropensityScoreDistance(), k=2, caliper=0.1)
        rows = list(pairs)
        assert [(r[0], r[1], r[3]) for r in rows] == [(1, 101, 1), (1, 102, 2)]
        assert rows[0][2] == pytest.approx(0.02)
        assert rows[1][2] == pytest.approx(0.05)

    def test_exact_tie_distance_zero(self):
        t = ps_table({1: 0.5}, {101: 0.5})
        pairs = nnm_with_replacement(t, PropensityScoreDistance(), k=1, caliper=0.1)
        assert list(pairs) == [(1, 101, 0.0, 1)]

    def test_control_reused_across_treated(self):
        t = ps_table({1: 0.50, 2: 0.51}, {101: 0.505, 102: 0.9})
        pairs = nnm_with_replacement(t, PropensityScoreDistance(), k=1, caliper=0.1)
        assert [(r[0], r[1]) for r in pairs] == [(1, 101), (2, 101)]

    def test_treated_without_admissible_controls_emits_nothing(self):
        t = ps_table({1: 0.1, 2: 0.5}, {101: 0.55})
        pairs = nnm_with_replacement(t, PropensityScoreDistance(), k=1, caliper=0.1)
        assert [(r[0], r[1]) for r in pairs] == [(2, 101)]

    def test_matches_exhaustive_oracle(self, rng):
        for trial in range(25):
            n_t = int(rng.integers(1, 8))
            n_c = int(rng.integers(1, 12))
            treated = {int(i): float(p) for i, p in
                       zip(range(n_t), rng.random(n_t) * 0.8 + 0.1)}
            controls = {int(100 + i): float(p) for i, p in
                        zip(range(n_c), rng.random(n_c) * 0.8 + 0.1)}
            t = ps_table(treated, controls)
            k = int(rng.integers(1, 4))
            caliper = float(rng.uniform(0.05, 0.5))
            got = [(r[0], r[1], r[3]) for r in
                   nnm_with_replacement(t, PropensityScoreDistance(), k, caliper)]
            lookup = {**treated, **controls}
            expected = [
                (t_, c_, o_) for t_, c_, d_, o_ in oracle_nnmwr(
                    list(treated), list(controls),
                    lambda a, b: abs(lookup[a] - lookup[b]), k, caliper,
                )
            ]
            assert got == expected

    def test_threads_do_not_change_output(self, rng):
        n = 600
        ps = rng.random(n) * 0.9 + 0.05
        t = (rng.random(n) < 0.3).astype(int)
        table = synth.units(
            range(n), numeric={"ps": ps}, binary={"t": t}, treatments=["t"]
        )
        one = nnm_with_replacement(table, PropensityScoreDistance(), 2, 0.05, threads=1)
        four = nnm_with_replacement(table, PropensityScoreDistance(), 2, 0.05, threads=4)
        assert np.array_equal(one.treated_ids, four.treated_ids)
        assert np.array_equal(one.control_ids, four.control_ids)
        assert np.array_equal(one.distances, four.distances)

    def test_permutation_invariant(self, rng):
        t = ps_table(
            {1: 0.2, 2: 0.4, 3: 0.6}, {101: 0.25, 102: 0.45, 103: 0.61, 104: 0.59}
        )
        shuffled = t.take(rng.permutation(t.n_rows))
        a = nnm_with_replacement(t, PropensityScoreDistance(), 2, 0.2)
        b = nnm_with_replacement(shuffled, PropensityScoreDistance(), 2, 0.2)
        assert list(a) == list(b)

    def test_caliper_required_positive(self):
        t = ps_table({1: 0.5}, {101: 0.5})
        with pytest.raises(DataError, match="caliper"):
            nnm_with_replacement(t, PropensityScoreDistance(), 1, 0.0)

    def test_coarsened_distance_matches_only_same_cell(self):
        table = synth.units(
            [1, 2, 101, 102, 103],
            numeric={"cx_a": [1.0, 2.0, 1.0, 2.0, 2.0]},
            binary={"t": [1, 1, 0, 0, 0]},
            treatments=["t"],
        )
        pairs = nnm_with_replacement(
            table, CoarsenedDistance(("cx_a",)), k=5, caliper=1.0
        )
        got = {(r[0], r[1]) for r in pairs}
        assert got == {(1, 101), (2, 102), (2, 103)}
        assert all(r[2] == 0.0 for r in pairs)


class TestNnmWithoutReplacement:
    def test_tie_break_prefers_smaller_treated_id(self):
        # Exactly representable distances: both treated units are 0.25 from
        # the single control, so the (distance, tID, cID) order decides.
        t = ps_table({1: 0.25, 2: 0.75}, {101: 0.5})
        pairs = nnm_without_replacement(t, PropensityScoreDistance(), 1, 0.3)
        assert [(r[0], r[1]) for r in pairs] == [(1, 101)]

    def test_spec_literal_values_pick_t1(self):
        # 0.505-0.50 is numerically a hair below 0.51-0.505 in float64, so
        # the same winner emerges without needing the tie-break.
        t = ps_table({1: 0.50, 2: 0.51}, {101: 0.505})
        pairs = nnm_without_replacement(t, PropensityScoreDistance(), 1, 0.1)
        assert [(r[0], r[1]) for r in pairs] == [(1, 101)]

    def test_disjoint_clusters_both_matched(self):
        t = ps_table({1: 0.2, 2: 0.8}, {101: 0.21, 102: 0.79})
        pairs = nnm_without_replacement(t, PropensityScoreDistance(), 1, 0.05)
        assert {(r[0], r[1]) for r in pairs} == {(1, 101), (2, 102)}

    def test_one_to_one_even_with_k_above_one(self, rng):
        t = ps_table(
            {1: 0.5, 2: 0.52}, {101: 0.5, 102: 0.51, 103: 0.53, 104: 0.54}
        )
        pairs = nnm_without_replacement(t, PropensityScoreDistance(), 3, 0.2)
        controls = [r[1] for r in pairs]
        assert len(controls) == len(set(controls))

    def test_matches_greedy_oracle(self, rng):
        for trial in range(25):
            n_t = int(rng.integers(1, 7))
            n_c = int(rng.integers(1, 9))
            treated = {int(i): float(p) for i, p in
                       zip(range(n_t), rng.random(n_t))}
            controls = {int(100 + i): float(p) for i, p in
                        zip(range(n_c), rng.random(n_c))}
            table = ps_table(treated, controls)
            k = int(rng.integers(1, 3))
            caliper = float(rng.uniform(0.1, 0.6))
            lookup = {**treated, **controls}
            got = [(r[0], r[1], r[3]) for r in
                   nnm_without_replacement(table, PropensityScoreDistance(), k, caliper)]
            expected = [
                (t_, c_, o_) for t_, c_, d_, o_ in oracle_nnmnr(
                    list(treated), list(controls),
                    lambda a, b: abs(lookup[a] - lookup[b]), k, caliper,
                )
            ]
            assert got == expected

    def test_greedy_at_least_half_of_optimum(self, rng):
        for trial in range(40):
            n_t = int(rng.integers(1, 5))
            n_c = int(rng.integers(1, 5))
            t_ps = rng.random(n_t) * 0.9 + 0.05
            c_ps = rng.random(n_c) * 0.9 + 0.05
            caliper = float(rng.uniform(0.1, 0.6))
            table = ps_table(
                {i: float(p) for i, p in enumerate(t_ps)},
                {100 + j: float(p) for j, p in enumerate(c_ps)},
            )
            pairs = nnm_without_replacement(
                table, PropensityScoreDistance(), 1, caliper
            )
            distances = np.abs(t_ps[:, None] - c_ps[None, :])
            best_card, _ = oracle_max_matching(distances, caliper)
            assert 2 * len(pairs) >= best_card

    def test_maximality(self, rng):
        # After the greedy pass no admissible pair remains with spare
        # capacity on both sides.
        for trial in range(15):
            n_t = int(rng.integers(1, 6))
            n_c = int(rng.integers(1, 8))
            treated = {i: float(p) for i, p in zip(range(n_t), rng.random(n_t))}
            controls = {100 + i: float(p) for i, p in zip(range(n_c), rng.random(n_c))}
            table = ps_table(treated, controls)
            k = int(rng.integers(1, 3))
            caliper = 0.4
            pairs = nnm_without_replacement(
                table, PropensityScoreDistance(), k, caliper
            )
            used_controls = {r[1] for r in pairs}
            counts = {t: 0 for t in treated}
            for r in pairs:
                counts[r[0]] += 1
            for t_id, t_ps in treated.items():
                for c_id, c_ps in controls.items():
                    if abs(t_ps - c_ps) < caliper:
                        assert counts[t_id] >= k or c_id in used_controls

    def test_wr_equals_nr_on_clustered_instances(self):
        # Each control is nearest to exactly one treated unit and clusters
        # are separated beyond the caliper.
        t = ps_table(
            {1: 0.1, 2: 0.5, 3: 0.9},
            {101: 0.11, 102: 0.09, 201: 0.51, 301: 0.89},
        )
        spec = PropensityScoreDistance()
        wr = nnm_with_replacement(t, spec, 2, 0.05)
        nr = nnm_without_replacement(t, spec, 2, 0.05)
        assert {(r[0], r[1]) for r in wr} == {(r[0], r[1]) for r in nr}

    def test_permutation_invariant(self, rng):
        t = ps_table(
            {1: 0.2, 2: 0.4, 3: 0.6}, {101: 0.25, 102: 0.45, 103: 0.61, 104: 0.59}
        )
        shuffled = t.take(rng.permutation(t.n_rows))
        a = nnm_without_replacement(t, PropensityScoreDistance(), 2, 0.2)
        b = nnm_without_replacement(shuffled, PropensityScoreDistance(), 2, 0.2)
        assert list(a) == list(b)

    def test_all_distances_below_caliper(self, rng):
        t = ps_table(
            {i: float(p) for i, p in zip(range(5), rng.random(5))},
            {100 + i: float(p) for i, p in zip(range(8), rng.random(8))},
        )
        for fn in (nnm_with_replacement, nnm_without_replacement):
            pairs = fn(t, PropensityScoreDistance(), 2, 0.15)
            assert all(r[2] < 0.15 for r in pairs)


class TestMatchedPairsCsv:
    def test_header_and_rows(self, tmp_path):
        t = ps_table({1: 0.5}, {101: 0.52})
        pairs = nnm_with_replacement(t, PropensityScoreDistance(), 1, 0.1)
        path = tmp_path / "pairs.csv"
        pairs.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "tID,cID,distance,order"
        assert lines[1].startswith("1,101,")
