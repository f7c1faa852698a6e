"""Tests for CSV tables, field files and PPM heatmaps."""

import numpy as np
import pandas as pd
import pytest

from src.errors import ShapeError
from src.models import MetricEntry, MetricsReport
from src.services.trainer import LossRecord
from src.utils.reports import (
    colorize,
    comparison_frame,
    plot_fields,
    read_fields,
    write_fields,
    write_loss_csv,
    write_metrics_csv,
    write_ppm,
    write_slice_csv,
)
from src.workflows.nested_pipeline import truth_composite
from tests.conftest import make_sample


def report(pressure_total: float, saturation_l1) -> MetricsReport:
    return MetricsReport(entries=[
        MetricEntry(field="pressure", level="total", metric="delta_p", value=pressure_total, n_cells=10),
        MetricEntry(field="pressure", level="1", metric="delta_p", value=0.02, n_cells=4),
        MetricEntry(field="pressure", level="0", metric="delta_p", value=0.01, n_cells=6),
        MetricEntry(field="saturation", level="1", metric="delta_s", value=saturation_l1, n_cells=4),
    ])


def test_ppm_header_and_size(tmp_path, rng):
    values = rng.random((3, 5))
    path = write_ppm(tmp_path / "slice.ppm", values)
    data = path.read_bytes()
    header = b"P6\n5 3\n255\n"
    assert data.startswith(header)
    assert len(data) == len(header) + 3 * 5 * 3


def test_constant_field_is_one_color(rng):
    rgb = colorize(np.full((4, 6), 2.5))
    assert rgb.shape == (4, 6, 3) and rgb.dtype == np.uint8
    assert len({tuple(px) for px in rgb.reshape(-1, 3)}) == 1


def test_heatmap_rows_follow_first_axis(tmp_path):
    values = np.array([[0.0, 0.0], [1.0, 1.0]])
    rgb = colorize(values)
    assert (rgb[0, 0] == rgb[0, 1]).all()
    assert not (rgb[0, 0] == rgb[1, 0]).all()
    with pytest.raises(ShapeError):
        write_ppm(tmp_path / "bad.ppm", np.zeros((2, 2, 2)))


def test_slice_csv_is_exact(tmp_path, rng):
    values = rng.normal(size=(4, 3)) * 1e3
    path = write_slice_csv(tmp_path / "slice.csv", values)
    np.testing.assert_array_equal(np.loadtxt(path, delimiter=","), values)


def test_metrics_csv_columns(tmp_path):
    path = write_metrics_csv(tmp_path / "metrics.csv", report(0.05, None))
    lines = path.read_text().splitlines()
    assert lines[0] == "field,level,metric,value,n_cells"
    assert lines[1] == "pressure,total,delta_p,0.05,10"
    assert lines[4] == "saturation,1,delta_s,,4"


def test_comparison_table_order():
    frame = comparison_frame({"sequential": report(0.05, 0.1), "separate": report(0.04, None)})
    assert frame["row"].tolist() == ["dP_total", "dP_L0", "dP_L1", "dS_L1"]
    assert list(frame.columns) == ["row", "sequential", "separate"]
    assert frame["separate"].tolist()[:3] == [0.04, 0.01, 0.02]
    assert pd.isna(frame["separate"].tolist()[3])


def test_loss_csv(tmp_path):
    path = write_loss_csv(tmp_path / "loss.csv", [LossRecord(0, 0, 0.001, 0.5), LossRecord(0, 1, 0.001, 0.25)])
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["epoch", "step", "lr", "loss"]
    assert frame["loss"].tolist() == [0.5, 0.25]


def test_field_file_roundtrip_and_plots(tmp_path):
    sample = make_sample(3, [(3, 3)], n_t=2, max_level=1)
    fields = {"pressure": truth_composite(sample, "pressure", 1),
              "saturation": truth_composite(sample, "saturation", 1)}
    write_fields(tmp_path / "fields_3.ngcs", 3, fields)
    sample_id, loaded = read_fields(tmp_path / "fields_3.ngcs")
    assert sample_id == 3 and sorted(loaded) == ["pressure", "saturation"]
    np.testing.assert_array_equal(loaded["pressure"].level0, fields["pressure"].level0)
    np.testing.assert_array_equal(loaded["saturation"].wells[0].levels[0], fields["saturation"].wells[0].levels[0])
    assert loaded["pressure"].wells[0].window == fields["pressure"].wells[0].window

    written = plot_fields(loaded, tmp_path / "plots", prefix="sample3")
    names = sorted(p.name for p in written)
    assert len(names) == 2 * 2 * 4
    assert "sample3_pressure_t01_xy.ppm" in names
    assert "sample3_saturation_t00_w0_L1_xz.csv" in names
    xz = np.loadtxt(tmp_path / "plots" / "sample3_pressure_t00_w0_L1_xz.csv", delimiter=",")
    np.testing.assert_array_equal(xz, loaded["pressure"].wells[0].levels[0][0][:, 4, :])
    assert loaded["pressure"].wells[0].location == (3, 3)


def test_side_slice_follows_the_well_column(tmp_path):
    # a corner well clamps its window, so its column is not the grid middle
    sample = make_sample(4, [(0, 1)], n_t=1, max_level=2)
    fields = {"pressure": truth_composite(sample, "pressure", 2)}
    write_fields(tmp_path / "fields_4.ngcs", 4, fields)
    _, loaded = read_fields(tmp_path / "fields_4.ngcs")
    plot_fields(loaded, tmp_path / "plots", prefix="corner")
    levels = loaded["pressure"].wells[0].levels
    # level 1: window starts at 0, child 0 of cell 1; level 2: (2 - 2) * 2 + 0
    for level, row in ((1, 2), (2, 0)):
        xz = np.loadtxt(tmp_path / "plots" / f"corner_pressure_t00_w0_L{level}_xz.csv", delimiter=",")
        np.testing.assert_array_equal(xz, levels[level - 1][0][:, row, :])

    loaded["pressure"].wells[0].location = None
    plot_fields(loaded, tmp_path / "middle", prefix="middle")
    xz = np.loadtxt(tmp_path / "middle" / "middle_pressure_t00_w0_L1_xz.csv", delimiter=",")
    np.testing.assert_array_equal(xz, levels[0][0][:, 4, :])
