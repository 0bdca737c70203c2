"""Table engine: CSV ingestion, joins, selection, round trips."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from matchcube.errors import DataError, SchemaError
from matchcube.tables import (
    ColumnKind,
    JoinSpec,
    join,
    load_csv,
    select,
    tables_equal,
    write_csv,
)

import synth
from oracles import oracle_select

SCHEMA = {
    "T": ColumnKind.BINARY,
    "x": ColumnKind.NUMERIC,
    "Y": ColumnKind.NUMERIC,
}


class TestLoadCsv:
    def test_three_line_file(self, csv_file):
        t = load_csv(csv_file("id,T,x,Y\n1,0,1.5,3\n2,1,2.5,4\n3,0,3.5,5\n"), SCHEMA)
        assert t.n_rows == 3
        assert t.ids.tolist() == [1, 2, 3]
        assert t.values("x").tolist() == [1.5, 2.5, 3.5]
        assert t.values("T").tolist() == [0, 1, 0]

    def test_binary_value_out_of_range_names_row_and_column(self, csv_file):
        with pytest.raises(DataError, match=r"row 2.*'T'.*0 or 1"):
            load_csv(csv_file("id,T,x,Y\n1,0,1,1\n2,2,1,1\n"), SCHEMA)

    def test_empty_data_section(self, csv_file):
        t = load_csv(csv_file("id,T,x,Y\n"), SCHEMA)
        assert t.n_rows == 0
        assert t.column_names == ("T", "x", "Y")

    def test_missing_column(self, csv_file):
        with pytest.raises(SchemaError, match=r"missing column.*'Y'"):
            load_csv(csv_file("id,T,x\n1,0,1\n"), SCHEMA)

    def test_unparseable_numeric_names_row_and_column(self, csv_file):
        with pytest.raises(DataError, match=r"row 2.*'x'"):
            load_csv(csv_file("id,T,x,Y\n1,0,1,1\n2,0,oops,1\n"), SCHEMA)

    def test_missing_cell_rejected(self, csv_file):
        with pytest.raises(DataError, match=r"row 1.*'x'"):
            load_csv(csv_file("id,T,x,Y\n1,0,,1\n"), SCHEMA)

    def test_non_finite_rejected(self, csv_file):
        with pytest.raises(DataError, match="non-finite"):
            load_csv(csv_file("id,T,x,Y\n1,0,inf,1\n"), SCHEMA)

    def test_duplicate_id(self, csv_file):
        with pytest.raises(DataError, match="duplicate id"):
            load_csv(csv_file("id,T,x,Y\n1,0,1,1\n1,1,2,2\n"), SCHEMA)

    def test_extra_file_columns_ignored(self, csv_file):
        t = load_csv(csv_file("id,junk,T,x,Y\n1,zzz,0,1,1\n"), SCHEMA)
        assert t.column_names == ("T", "x", "Y")

    def test_categorical_interning_first_appearance(self, csv_file):
        t = load_csv(
            csv_file("id,carrier\n1,UA\n2,AA\n3,UA\n"),
            {"carrier": ColumnKind.CATEGORICAL},
        )
        col = t.column("carrier")
        assert col.labels == ("UA", "AA")
        assert col.values.tolist() == [0, 1, 0]


class TestRoundTrip:
    def test_write_then_load_identical(self, tmp_path):
        t = synth.units(
            [3, 1, 2],
            numeric={"x": [0.1, 2.5, -3.75]},
            binary={"T": [1, 0, 1]},
            categorical={"c": ["b", "a", "b"]},
        )
        path = tmp_path / "t.csv"
        write_csv(t, path)
        back = load_csv(
            path,
            {
                "x": ColumnKind.NUMERIC,
                "T": ColumnKind.BINARY,
                "c": ColumnKind.CATEGORICAL,
            },
        )
        assert tables_equal(t, back)

    @settings(
        max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture]
    )
    @given(
        values=st.lists(
            st.floats(allow_nan=False, allow_infinity=False, width=64),
            min_size=1,
            max_size=20,
        )
    )
    def test_float_round_trip(self, tmp_path, values):
        # Re-using one scratch file across examples is fine: each example
        # overwrites it completely.
        t = synth.units(range(len(values)), numeric={"x": values})
        path = tmp_path / "floats.csv"
        write_csv(t, path)
        back = load_csv(path, {"x": ColumnKind.NUMERIC})
        assert back.values("x").tolist() == t.values("x").tolist()


class TestInvariants:
    def test_ps_column_open_interval(self):
        with pytest.raises(DataError, match="ps"):
            synth.units([1, 2], numeric={"ps": [0.5, 1.0]})

    def test_columns_frozen(self):
        t = synth.units([1], numeric={"x": [1.0]})
        with pytest.raises(ValueError):
            t.values("x")[0] = 2.0

    def test_treatment_designation_must_be_binary(self):
        with pytest.raises(SchemaError, match="binary"):
            synth.units([1], numeric={"T": [1.0]}, treatments=["T"])

    def test_unique_ids(self):
        with pytest.raises(DataError, match="unique"):
            synth.units([1, 1], numeric={"x": [1.0, 2.0]})


def _join_tables():
    parent = synth.units(
        [10, 11],
        numeric={"wkey": [100.0, 200.0], "temp": [5.0, 9.0]},
        name="weather",
    )
    child = synth.units(
        [1, 2, 3],
        numeric={"fk": [100.0, 100.0, 300.0], "delay": [7.0, 8.0, 9.0]},
        name="flights",
    )
    spec = JoinSpec("weather", "flights", "wkey", "fk")
    return parent, child, spec


class TestJoin:
    def test_fan_out(self):
        parent, child, spec = _join_tables()
        out = join(parent, child, spec)
        assert out.ids.tolist() == [1, 2]
        assert out.values("temp").tolist() == [5.0, 5.0]
        assert out.values("delay").tolist() == [7.0, 8.0]

    def test_unmatched_child_dropped(self):
        parent, child, spec = _join_tables()
        out = join(parent, child, spec)
        assert 3 not in out.ids

    def test_duplicate_parent_key(self):
        parent = synth.units(
            [10, 11], numeric={"wkey": [100.0, 100.0]}, name="weather"
        )
        _, child, spec = _join_tables()
        with pytest.raises(DataError, match="duplicate parent key"):
            join(parent, child, spec)

    def test_join_on_parent_id(self):
        parent = synth.units([100, 200], numeric={"temp": [5.0, 9.0]})
        child = synth.units([1, 2], numeric={"fk": [200.0, 100.0]})
        out = join(parent, child, JoinSpec("", "", "id", "fk"))
        assert out.values("temp").tolist() == [9.0, 5.0]

    def test_row_count_equals_scan(self, rng):
        for _ in range(20):
            n_parent = int(rng.integers(1, 8))
            parent_keys = rng.choice(50, size=n_parent, replace=False).astype(float)
            parent = synth.units(
                np.arange(n_parent) + 500, numeric={"k": parent_keys}
            )
            n_child = int(rng.integers(1, 40))
            fk = rng.integers(0, 50, size=n_child).astype(float)
            child = synth.units(np.arange(n_child), numeric={"fk": fk})
            out = join(parent, child, JoinSpec("", "", "k", "fk"))
            assert out.n_rows == int(np.isin(fk, parent_keys).sum())

    def test_categorical_keys_join_by_label(self):
        parent = synth.units(
            [1, 2], categorical={"code": ["SFO", "JFK"]}, numeric={"t": [1.0, 2.0]}
        )
        child = synth.units(
            [5, 6, 7], categorical={"ap": ["JFK", "SFO", "JFK"]}
        )
        out = join(parent, child, JoinSpec("", "", "code", "ap"))
        assert out.values("t").tolist() == [2.0, 1.0, 2.0]


class TestSelect:
    def setup_method(self):
        self.t = synth.units(
            [1, 2, 3, 4, 5],
            categorical={"airport": ["SFO", "EWR", "SFO", "JFK", "EWR"]},
            numeric={"year": [2008, 2011, 2015, 2010, 2010]},
        )

    def test_filter(self):
        out = select(self.t, 'airport = "SFO"')
        assert out.ids.tolist() == [1, 3]

    def test_always_true_identity(self):
        out = select(self.t, "year >= 0")
        assert tables_equal(out, self.t)

    def test_conjunction_matches_row_scan(self):
        out = select(self.t, 'year >= 2010 AND airport = "EWR"')
        expected = oracle_select(
            self.t, lambda r: r["year"] >= 2010 and r["airport"] == "EWR"
        )
        assert out.ids.tolist() == expected

    def test_unknown_column(self):
        with pytest.raises(SchemaError, match="unknown column"):
            select(self.t, "altitude > 3")

    def test_idempotent_and_subset(self):
        once = select(self.t, "year > 2009")
        twice = select(once, "year > 2009")
        assert tables_equal(once, twice)
        assert set(once.ids.tolist()) <= set(self.t.ids.tolist())


@settings(max_examples=40, deadline=None)
@given(
    years=st.lists(st.integers(min_value=1990, max_value=2030), min_size=1, max_size=30),
    threshold=st.integers(min_value=1990, max_value=2030),
)
def test_select_matches_scan_property(years, threshold):
    t = synth.units(range(len(years)), numeric={"year": [float(y) for y in years]})
    out = select(t, f"year < {threshold}")
    assert out.ids.tolist() == oracle_select(t, lambda r: r["year"] < threshold)
