import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ioulme.data import (
    DataError,
    DataRules,
    Dataset,
    IngestReport,
    SchemaConfig,
    Subject,
    ingest_csv,
    read_csv,
    validate,
    write_csv,
)

SCHEMA = SchemaConfig(id_col="id", time_col="t", y_col="y", x_cols=("x1", "x2"), z_cols=("z1", "z2"))


def make_subject(sid="a", times=(1.0, 2.0, 3.0)):
    n = len(times)
    return Subject(
        id=sid,
        times=times,
        y=np.arange(n, dtype=float),
        x_design=np.ones((n, 2)),
        z_design=np.column_stack([np.ones(n), np.asarray(times)]),
    )


def make_dataset(subjects=None, horizon=20.0):
    subjects = subjects or (make_subject(),)
    return Dataset(subjects=tuple(subjects), horizon=horizon, p_beta=2, p_b=2)


class TestValidate:
    def test_well_formed(self):
        assert validate(make_dataset()) == []

    def test_times_not_increasing(self):
        ds = make_dataset((make_subject(times=(2.0, 1.0)),))
        messages = [v.message for v in validate(ds)]
        assert any("strictly increasing" in m for m in messages)

    def test_row_count_mismatch(self):
        s = Subject(id="a", times=[1.0, 2.0, 3.0], y=[1.0, 2.0, 3.0],
                    x_design=np.ones((2, 2)), z_design=np.ones((3, 2)))
        out = validate(make_dataset((s,)))
        assert any("row count mismatch" in v.message and v.field == "x_design" for v in out)

    def test_time_zero_rejected_unless_allowed(self):
        ds = make_dataset((make_subject(times=(0.0, 1.0)),))
        assert any("positive" in v.message for v in validate(ds))
        assert validate(ds, DataRules(allow_time_zero=True)) == []

    def test_ties_rejected_unless_allowed(self):
        ds = make_dataset((make_subject(times=(1.0, 1.0, 2.0)),))
        assert any("strictly increasing" in v.message for v in validate(ds))
        assert validate(ds, DataRules(allow_ties=True)) == []

    def test_covariate_magnitude_cap(self):
        s = make_subject()
        big = np.array(s.x_design)
        big[0, 0] = 2e6
        s2 = Subject(id="a", times=s.times, y=s.y, x_design=big, z_design=s.z_design)
        out = validate(make_dataset((s2,)))
        assert any("magnitude" in v.message for v in out)
        assert validate(make_dataset((s2,)), DataRules(max_abs_covariate=1e7)) == []

    def test_beyond_horizon(self):
        ds = make_dataset((make_subject(times=(1.0, 25.0)),))
        assert any("horizon" in v.message for v in validate(ds))

    def test_violations_carry_subject_id(self):
        ds = make_dataset((make_subject(sid="bad", times=(2.0, 1.0)),))
        assert all(v.subject_id == "bad" for v in validate(ds))


def write_rows(path, rows, header="id,t,y,x1,x2,z1,z2"):
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")


class TestReadCsv:
    def test_basic_parse(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,1,0.5,1,0,1,1", "a,2,0.7,2,1,1,2", "a,3,0.9,3,0,1,3"])
        ds = read_csv(f, SCHEMA)
        assert ds.n_subjects == 1
        assert ds.subjects[0].n_obs == 3
        assert ds.p_beta == 2 and ds.p_b == 2

    def test_rows_sorted_by_time(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,3,0.9,3,0,1,3", "a,1,0.5,1,0,1,1", "a,2,0.7,2,1,1,2"])
        ds = read_csv(f, SCHEMA)
        assert list(ds.subjects[0].times) == [1.0, 2.0, 3.0]
        assert list(ds.subjects[0].y) == [0.5, 0.7, 0.9]

    def test_two_subjects_grouped(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,1,1,1,0,1,1", "a,2,2,2,0,1,2", "b,1,1,1,1,1,1", "b,2,2,2,1,1,2", "b,3,3,3,1,1,3"])
        ds = read_csv(f, SCHEMA)
        assert ds.n_subjects == 2
        assert [s.n_obs for s in ds.subjects] == [2, 3]

    def test_non_numeric_cell(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,abc,0.5,1,0,1,1"])
        with pytest.raises(DataError, match="non-numeric"):
            read_csv(f, SCHEMA)

    def test_missing_column(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,1,0.5,1,0,1"], header="id,t,y,x1,x2,z1")
        with pytest.raises(DataError, match="z2"):
            read_csv(f, SCHEMA)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            read_csv(tmp_path / "absent.csv", SCHEMA)

    def test_missing_y_dropped_with_count(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,1,,1,0,1,1", "a,2,0.7,2,1,1,2", "a,3,NA,3,0,1,3"])
        ds, report = ingest_csv(f, SCHEMA)
        assert isinstance(report, IngestReport)
        assert report.n_rows_dropped_missing_y == 2
        assert ds.subjects[0].n_obs == 1

    def test_duplicate_time_rejected(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,1,0.5,1,0,1,1", "a,1,0.6,1,0,1,1"])
        with pytest.raises(DataError, match="duplicate"):
            read_csv(f, SCHEMA)
        ds = read_csv(f, SCHEMA, DataRules(allow_ties=True))
        assert ds.subjects[0].n_obs == 2

    def test_validate_after_read_is_empty(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,1,0.5,1,0,1,1", "b,2,0.7,2,1,1,2"])
        ds = read_csv(f, SCHEMA)
        assert validate(ds) == []


class TestRoundTrip:
    def test_fixed_case(self, tmp_path):
        f = tmp_path / "d.csv"
        write_rows(f, ["a,1.25,0.5125,1,0,1,1.25", "a,2.5,-0.7,2.5,1,1,2.5"])
        ds = read_csv(f, SCHEMA)
        out = tmp_path / "out.csv"
        write_csv(ds, out, SCHEMA)
        ds2 = read_csv(out, SCHEMA)
        for s1, s2 in zip(ds.subjects, ds2.subjects):
            np.testing.assert_allclose(s1.times, s2.times, rtol=1e-12)
            np.testing.assert_allclose(s1.y, s2.y, rtol=1e-12)
            np.testing.assert_allclose(s1.x_design, s2.x_design, rtol=1e-12)
            np.testing.assert_allclose(s1.z_design, s2.z_design, rtol=1e-12)

    @given(seed=st.integers(0, 10_000))
    def test_roundtrip_random(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        subjects = []
        for i in range(rng.integers(1, 4)):
            n = int(rng.integers(1, 5))
            times = np.sort(rng.uniform(0.01, 19.0, n))
            if np.any(np.diff(times) == 0):
                times = np.arange(1.0, n + 1.0)
            subjects.append(
                Subject(
                    id=f"s{i}",
                    times=times,
                    y=rng.normal(size=n) * 10.0 ** rng.integers(-3, 4),
                    x_design=rng.normal(size=(n, 2)),
                    z_design=rng.normal(size=(n, 2)),
                )
            )
        ds = Dataset(subjects=tuple(subjects), horizon=20.0, p_beta=2, p_b=2)
        path = tmp_path_factory.mktemp("rt") / "d.csv"
        write_csv(ds, path, SCHEMA)
        ds2 = read_csv(path, SCHEMA)
        assert ds2.n_subjects == ds.n_subjects
        for s1, s2 in zip(ds.subjects, ds2.subjects):
            np.testing.assert_allclose(s1.times, s2.times, rtol=1e-12)
            np.testing.assert_allclose(s1.y, s2.y, rtol=1e-12)
            np.testing.assert_allclose(s1.x_design, s2.x_design, rtol=1e-12)
            np.testing.assert_allclose(s1.z_design, s2.z_design, rtol=1e-12)


class TestSchemaConfig:
    def test_from_json(self, tmp_path):
        f = tmp_path / "schema.json"
        f.write_text(json.dumps({"id_col": "id", "time_col": "t", "y_col": "y", "x_cols": ["x1"], "z_cols": ["z1"]}))
        schema = SchemaConfig.from_json(f)
        assert schema.id_col == "id"
        assert schema.x_cols == ("x1",)

    def test_missing_key(self, tmp_path):
        f = tmp_path / "schema.json"
        f.write_text(json.dumps({"id_col": "id", "time_col": "t"}))
        with pytest.raises(DataError, match="y_col"):
            SchemaConfig.from_json(f)

    def test_bad_json(self, tmp_path):
        f = tmp_path / "schema.json"
        f.write_text("{not json")
        with pytest.raises(DataError, match="JSON"):
            SchemaConfig.from_json(f)


def test_subject_arrays_immutable():
    s = make_subject()
    with pytest.raises(ValueError):
        s.times[0] = 99.0
