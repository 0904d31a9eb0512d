import csv

import numpy as np
import pytest

from panelqr.errors import (
    DegenerateIndexError,
    PanelBalanceError,
    PanelDataError,
    PanelSchemaError,
)
from panelqr.panelio import (
    PanelDataset,
    QuantileSpec,
    load_panel_csv,
    normalize_index,
    parse_schema,
)

SCHEMA = {"id": "unit", "t": "period", "y": "resp", "x": ["x1"], "z": "idx"}


def write_long_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "period", "resp", "x1", "idx"])
        writer.writerows(rows)


def small_rows():
    rows = []
    for unit in ("a", "b"):
        for t, z in zip((1, 2, 3), (0.1, 0.5, 0.9)):
            rows.append([unit, t, 1.0 + t, 0.5 * t, z])
    return rows


class TestLoad:
    def test_minimal_well_formed(self, tmp_path):
        path = tmp_path / "p.csv"
        write_long_csv(path, small_rows())
        ds = load_panel_csv(path, SCHEMA)
        assert (ds.n_subjects, ds.n_times, ds.dim_x) == (2, 3, 1)
        assert ds.index_kind == "shared"
        assert ds.subject_labels == ("a", "b")

    def test_nan_cell_names_location(self, tmp_path):
        rows = small_rows()
        rows[2][2] = "nan"
        path = tmp_path / "p.csv"
        write_long_csv(path, rows)
        with pytest.raises(PanelDataError) as err:
            load_panel_csv(path, SCHEMA)
        assert err.value.column == "resp"
        assert err.value.row == 2

    def test_unbalanced_subject_listed(self, tmp_path):
        rows = small_rows()[:-1]  # drop b's last period
        path = tmp_path / "p.csv"
        write_long_csv(path, rows)
        with pytest.raises(PanelBalanceError) as err:
            load_panel_csv(path, SCHEMA)
        assert err.value.subjects == ("b",)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "p.csv"
        write_long_csv(path, small_rows())
        with pytest.raises(PanelSchemaError):
            load_panel_csv(path, {**SCHEMA, "y": "nope"})

    def test_subject_specific_index_detected(self, tmp_path):
        rows = small_rows()
        rows[0][4] = 0.11  # subject a sees a different z at t=1
        path = tmp_path / "p.csv"
        write_long_csv(path, rows)
        ds = load_panel_csv(path, SCHEMA)
        assert ds.index_kind == "subject"
        assert ds.index.shape == (2, 3)

    def test_scaled_time_index(self, tmp_path):
        path = tmp_path / "p.csv"
        write_long_csv(path, small_rows())
        ds = load_panel_csv(path, SCHEMA, index="time")
        assert np.allclose(ds.index, [1 / 3, 2 / 3, 1.0])
        assert ds.index_kind == "time"

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(5)
        y = rng.normal(size=(3, 4))
        x = rng.normal(size=(3, 4, 2))
        z = rng.uniform(size=4)
        ds = PanelDataset(y=y, x=x, index=z, subject_labels=("u1", "u2", "u3"))
        path = tmp_path / "out.csv"
        ds.to_csv(path)
        back = load_panel_csv(
            path, {"id": "subject", "t": "time", "y": "y", "x": ["x1", "x2"], "z": "z"}
        )
        assert np.array_equal(back.y, ds.y)
        assert np.array_equal(back.x, ds.x)
        assert np.array_equal(back.index, ds.index)


class TestNormalize:
    def test_affine_map(self):
        ds = PanelDataset(
            y=np.zeros((1, 3)), x=np.zeros((1, 3, 1)), index=[2.0, 4.0, 6.0]
        )
        out = normalize_index(ds)
        assert np.allclose(out.index, [0.0, 0.5, 1.0])
        assert out.index_offset == 2.0
        assert out.index_scale == 4.0

    def test_identity_when_already_unit(self):
        ds = PanelDataset(
            y=np.zeros((1, 3)), x=np.zeros((1, 3, 1)), index=[0.0, 0.25, 1.0]
        )
        out = normalize_index(ds)
        assert out is ds

    def test_idempotent(self):
        ds = PanelDataset(
            y=np.zeros((1, 3)), x=np.zeros((1, 3, 1)), index=[2.0, 4.0, 6.0]
        )
        once = normalize_index(ds)
        twice = normalize_index(once)
        assert np.array_equal(once.index, twice.index)

    def test_constant_index_rejected(self):
        ds = PanelDataset(
            y=np.zeros((1, 3)), x=np.zeros((1, 3, 1)), index=[3.0, 3.0, 3.0]
        )
        with pytest.raises(DegenerateIndexError):
            normalize_index(ds)

    def test_back_transform_recovers_original(self):
        z = np.array([1.5, 2.0, 8.0])
        ds = PanelDataset(y=np.zeros((1, 3)), x=np.zeros((1, 3, 1)), index=z)
        out = normalize_index(ds)
        assert np.allclose(out.index_offset + out.index_scale * out.index, z)


class TestDataset:
    def test_arrays_read_only(self):
        ds = PanelDataset(
            y=np.zeros((2, 2)), x=np.zeros((2, 2, 1)), index=[0.0, 1.0]
        )
        with pytest.raises(ValueError):
            ds.y[0, 0] = 1.0

    def test_nonfinite_rejected(self):
        with pytest.raises(PanelDataError):
            PanelDataset(
                y=np.array([[np.inf, 0.0]]), x=np.zeros((1, 2, 1)), index=[0.0, 1.0]
            )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            PanelDataset(y=np.zeros((2, 2)), x=np.zeros((3, 2, 1)), index=[0.0, 1.0])


class TestSchema:
    def test_string_form(self):
        m = parse_schema("y=hp, x=pop+inc, z=inf, id=lad, t=quarter")
        assert m["x"] == ["pop", "inc"]
        assert m["z"] == "inf"

    def test_missing_role(self):
        with pytest.raises(PanelSchemaError):
            parse_schema("y=hp, id=lad, t=quarter")


class TestQuantileSpec:
    def test_valid(self):
        spec = QuantileSpec(tau=0.25, tau_grid=(0.1, 0.5, 0.9), epsilon=0.05)
        assert spec.tau_grid == (0.1, 0.5, 0.9)

    def test_grid_must_increase(self):
        with pytest.raises(ValueError):
            QuantileSpec(tau=0.5, tau_grid=(0.5, 0.5))

    def test_grid_must_respect_trim(self):
        with pytest.raises(ValueError):
            QuantileSpec(tau=0.5, tau_grid=(0.01, 0.5), epsilon=0.05)

    def test_tau_bounds(self):
        with pytest.raises(ValueError):
            QuantileSpec(tau=1.0)

    def test_default_grid(self):
        spec = QuantileSpec.default_grid()
        assert len(spec.tau_grid) == 19
        assert spec.tau_grid[0] == pytest.approx(0.05)
        assert spec.tau_grid[-1] == pytest.approx(0.95)
