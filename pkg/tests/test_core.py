import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linkedcausal.core import (
    FeatureMap,
    ModelSpec,
    build_design,
    from_arrays,
    load_csv,
    write_csv,
)
from linkedcausal.errors import (
    ConsistencyError,
    DegeneracyError,
    MissingDataError,
    ParseError,
    ValidationError,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestLoadCsv:

    def test_four_row_file(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, [
            "r,z,y,x1,v1",
            "1,1,2.0,0.1,0.5",
            "1,0,1.0,-0.2,0.3",
            "1,1,3.0,0.4,-0.1",
            "0,0,0.5,0.2,",
        ])
        ds = load_csv(f, "continuous")
        assert ds.n == 4
        assert ds.n_linked == 3
        assert np.isnan(ds.v[3, 0])

    def test_v_present_on_unlinked_row(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, [
            "r,z,y,x1,v1",
            "1,1,2.0,0.1,0.5",
            "1,0,1.0,-0.2,0.3",
            "0,0,0.5,0.2,0.7",
        ])
        with pytest.raises(ConsistencyError):
            load_csv(f, "continuous")

    def test_v_missing_on_linked_row(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, [
            "r,z,y,x1,v1",
            "1,1,2.0,0.1,",
            "1,0,1.0,-0.2,0.3",
        ])
        with pytest.raises(ConsistencyError):
            load_csv(f, "continuous")

    def test_single_arm_linked_subset(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, [
            "r,z,y,x1,v1",
            "1,1,2.0,0.1,0.5",
            "1,1,1.0,-0.2,0.3",
            "0,0,0.5,0.2,",
        ])
        with pytest.raises(DegeneracyError):
            load_csv(f, "continuous")

    def test_malformed_row_reports_line(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, [
            "r,z,y,x1,v1",
            "1,1,2.0,0.1,0.5",
            "1,0,oops,-0.2,0.3",
        ])
        with pytest.raises(ParseError, match="line 3"):
            load_csv(f, "continuous")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_csv(tmp_path / "nope.csv", "continuous")

    def test_bad_header(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, ["r,z,y,a,b", "1,1,2.0,0.1,0.5"])
        with pytest.raises(ParseError):
            load_csv(f, "continuous")

    def test_crlf_accepted(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_bytes(b"r,z,y,x1,v1\r\n1,1,2.0,0.1,0.5\r\n1,0,1.0,0.2,0.3\r\n")
        ds = load_csv(f, "continuous")
        assert ds.n == 2

    def test_binary_family_checks_y(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, [
            "r,z,y,x1,v1",
            "1,1,2.0,0.1,0.5",
            "1,0,1.0,0.2,0.3",
        ])
        with pytest.raises(ValidationError):
            load_csv(f, "binary")


class TestRoundTrip:

    def test_write_then_load_identical(self, tmp_path):
        rng = np.random.default_rng(5)
        n = 40
        r = (rng.random(n) < 0.7).astype(int)
        r[:2] = 1
        z = (rng.random(n) < 0.5).astype(int)
        z[0], z[1] = 0, 1
        v = np.where(r[:, None] == 1, rng.standard_normal((n, 2)), np.nan)
        ds = from_arrays(r, z, rng.standard_normal(n),
                         rng.standard_normal((n, 3)), v, "continuous")
        f = tmp_path / "d.csv"
        write_csv(ds, f)
        ds2 = load_csv(f, "continuous")
        npt.assert_array_equal(ds.r, ds2.r)
        npt.assert_array_equal(ds.z, ds2.z)
        npt.assert_array_equal(ds.y, ds2.y)
        npt.assert_array_equal(ds.x, ds2.x)
        npt.assert_array_equal(ds.v[ds.linked], ds2.v[ds2.linked])

    def test_file_reproduced_byte_for_byte(self, tmp_path):
        # canonical float formatting in, identical file out
        f = tmp_path / "d.csv"
        text = ("r,z,y,x1,v1\n"
                "1,1,2.0,0.125,0.5\n"
                "1,0,1.5,-0.25,0.75\n"
                "0,1,0.5,3.0,\n")
        f.write_text(text, encoding="utf-8")
        g = tmp_path / "e.csv"
        write_csv(load_csv(f, "continuous"), g)
        assert g.read_text(encoding="utf-8") == text

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_round_trip_random(self, seed):
        import tempfile
        from pathlib import Path

        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 30))
        r = (rng.random(n) < 0.6).astype(int)
        r[:2] = 1
        z = (rng.random(n) < 0.5).astype(int)
        z[0], z[1] = 0, 1
        v = np.where(r[:, None] == 1, rng.standard_normal((n, 1)), np.nan)
        ds = from_arrays(r, z, rng.standard_normal(n),
                         rng.standard_normal((n, 1)), v, "continuous")
        with tempfile.TemporaryDirectory() as tmp:
            f = Path(tmp) / "d.csv"
            write_csv(ds, f)
            ds2 = load_csv(f, "continuous")
        npt.assert_array_equal(ds.y, ds2.y)
        npt.assert_array_equal(ds.x, ds2.x)
        # count of v-present rows always equals count of r = 1 rows
        assert (~np.isnan(ds2.v[:, 0])).sum() == ds2.n_linked


class TestBuildDesign:

    @pytest.fixture
    def two_row(self):
        return from_arrays([1, 1], [1, 0], [1.0, 2.0],
                           np.array([[2.0], [-4.0]]),
                           np.array([[0.5], [0.25]]), "continuous")

    def test_identity_intercept(self, two_row):
        fm = FeatureMap(mains=("x0",))
        X = build_design(two_row, fm, rows=[0])
        npt.assert_array_equal(X, [[1.0, 2.0]])

    def test_sqrt_abs(self, two_row):
        fm = FeatureMap(mains=("x0",), transform="sqrt_abs")
        X = build_design(two_row, fm, rows=[1])
        npt.assert_array_equal(X, [[1.0, 2.0]])  # |-4|^(1/2) = 2

    def test_outcome_map_column_order(self):
        ds = from_arrays([1, 1], [1, 0], [1.0, 2.0],
                         np.array([[3.0], [1.0]]),
                         np.array([[0.5], [0.25]]), "continuous")
        fm = FeatureMap(mains=("z", "x0"), interactions=(("z", "x0"),))
        X = build_design(ds, fm, rows=[0])
        npt.assert_array_equal(X, [[1.0, 1.0, 3.0, 3.0]])
        assert fm.column_names() == ("1", "z", "x0", "z*x0")

    def test_z_override(self, two_row):
        fm = FeatureMap(mains=("z", "x0"), interactions=(("z", "x0"),))
        X = build_design(two_row, fm, rows=[1], z_override=1)
        npt.assert_array_equal(X, [[1.0, 1.0, -4.0, -4.0]])

    def test_v_on_unlinked_row_raises(self):
        ds = from_arrays([1, 1, 0], [1, 0, 1], [1.0, 2.0, 3.0],
                         np.ones((3, 1)),
                         np.array([[0.5], [0.25], [np.nan]]), "continuous")
        fm = FeatureMap(mains=("v0",))
        with pytest.raises(MissingDataError):
            build_design(ds, fm, rows="all")
        X = build_design(ds, fm, rows="linked")
        assert X.shape == (2, 2)

    def test_pure_function(self, two_row):
        fm = FeatureMap(mains=("x0", "v0"), interactions=(("x0", "v0"),),
                        transform="sqrt_abs")
        a = build_design(two_row, fm)
        b = build_design(two_row, fm)
        assert a is not b
        npt.assert_array_equal(a, b)

    @given(st.integers(min_value=1, max_value=4),
           st.integers(min_value=1, max_value=3))
    @settings(max_examples=20, deadline=None)
    def test_width_is_deterministic(self, p, q):
        spec = ModelSpec.default(p, q)
        assert spec.outcome.width == 1 + 1 + p + q + p + q
        assert spec.selection.width == 1 + p
        assert spec.propensity.width == 1 + p + q
        assert spec.imputation.width == 1 + p

    def test_bad_token_rejected(self):
        with pytest.raises(ValidationError):
            FeatureMap(mains=("w0",))
        spec = ModelSpec.default(1, 1)
        with pytest.raises(ValidationError):
            spec.selection.validate_for(1, 1, allow="v")


class TestFromArrays:

    def test_nonfinite_x_rejected(self):
        with pytest.raises(ValidationError):
            from_arrays([1, 1], [1, 0], [1.0, 2.0],
                        np.array([[np.inf], [0.0]]),
                        np.array([[0.5], [0.25]]), "continuous")

    def test_immutable_after_construction(self):
        ds = from_arrays([1, 1], [1, 0], [1.0, 2.0], np.ones((2, 1)),
                         np.array([[0.5], [0.25]]), "continuous")
        with pytest.raises(ValueError):
            ds.y[0] = 7.0

    def test_record_view(self):
        ds = from_arrays([1, 1, 0], [1, 0, 0], [1.0, 2.0, 3.0], np.ones((3, 1)),
                         np.array([[0.5], [0.3], [np.nan]]), "continuous")
        rec0 = ds.record(0)
        assert rec0.v is not None and rec0.r == 1
        assert ds.record(2).v is None
