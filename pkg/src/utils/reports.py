"""
Report emission: CSV tables and PPM heatmaps.

CSV files are written through pandas with ``.`` decimals, ``\\n`` line ends
and no index column, so the same inputs always give the same bytes. Heatmaps
are binary PPM (P6) images colored with a matplotlib colormap; each image
row is one index of the slice's first axis.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd
from matplotlib import colormaps

from src.errors import DatasetIOError, ShapeError
from src.models import BenchRow, Box, FlopEstimate, MetricEntry, MetricsReport, NestedGeometry, StudyRow
from src.services.geometry import CompositeField, WellLevels, well_columns
from src.services.trainer import LossRecord
from src.utils.binary_io import read_records, write_records

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METRIC_COLUMNS = ["field", "level", "metric", "value", "n_cells"]
LOSS_COLUMNS = ["epoch", "step", "lr", "loss"]
SYMBOLS = {"pressure": "dP", "saturation": "dS"}


def _write_csv(frame: pd.DataFrame, path: PathLike, header: bool = True) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, header=header, lineterminator="\n")
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e
    logger.info(f"📝 Wrote {path}")
    return path


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def metrics_frame(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([e.model_dump() for e in report.entries], columns=list(MetricEntry.model_fields))


def write_metrics_csv(path: PathLike, report: MetricsReport) -> Path:
    """(field, level, metric, value, n_cells); an undefined value is an empty cell."""
    return _write_csv(metrics_frame(report).reindex(columns=METRIC_COLUMNS), path)


def write_distribution_csv(path: PathLike, report: MetricsReport) -> Path:
    """Per-sample statistics (mean, median, quartiles) of every row."""
    columns = ["field", "level", "metric", "value", "median", "q1", "q3", "n_samples"]
    return _write_csv(metrics_frame(report).reindex(columns=columns), path)


def row_label(field: str, level: str) -> str:
    """``dP_total``, ``dP_L0``, ``dS_L3``..."""
    return f"{SYMBOLS[field]}_{'total' if level == 'total' else 'L' + level}"


def comparison_frame(reports: dict[str, MetricsReport]) -> pd.DataFrame:
    """
    One row per (field, level) and one column per named report.

    Rows follow the usual accuracy-table order: pressure total, pressure
    levels, saturation total, saturation levels.
    """
    labels: list[tuple[str, str]] = []
    for report in reports.values():
        for e in report.entries:
            if (e.field, e.level) not in labels:
                labels.append((e.field, e.level))
    labels.sort(key=lambda fl: (fl[0], -1 if fl[1] == "total" else int(fl[1])))
    data = {"row": [row_label(f, level) for f, level in labels]}
    for name, report in reports.items():
        data[name] = [report.value(f, level) for f, level in labels]
    return pd.DataFrame(data)


def write_comparison_csv(path: PathLike, reports: dict[str, MetricsReport]) -> Path:
    return _write_csv(comparison_frame(reports), path)


def write_loss_csv(path: PathLike, history: Iterable[LossRecord]) -> Path:
    frame = pd.DataFrame([(r.epoch, r.step, r.lr, r.loss) for r in history], columns=LOSS_COLUMNS)
    return _write_csv(frame, path)


def write_study_csv(path: PathLike, rows: list[StudyRow]) -> Path:
    columns = list(StudyRow.model_fields)
    return _write_csv(pd.DataFrame([r.model_dump() for r in rows], columns=columns), path)


def write_bench_csv(path: PathLike, rows: list[BenchRow]) -> Path:
    columns = list(BenchRow.model_fields)
    return _write_csv(pd.DataFrame([r.model_dump() for r in rows], columns=columns), path)


def write_flops_csv(path: PathLike, estimate: FlopEstimate) -> Path:
    row = estimate.model_dump()
    row["grid"] = "x".join(str(n) for n in estimate.grid)
    return _write_csv(pd.DataFrame([row]), path)


# ---------------------------------------------------------------------------
# composite field files
# ---------------------------------------------------------------------------


def write_fields(path: PathLike, sample_id: int, fields: dict[str, CompositeField]) -> None:
    """Store the composited fields of one sample (sharing one geometry) as a single NGCS1 record."""
    tensors: dict[str, np.ndarray] = {}
    for name, composite in fields.items():
        tensors[f"{name}/0"] = composite.level0
        for w, well in enumerate(composite.wells):
            for k, arr in enumerate(well.levels):
                tensors[f"{name}/{k + 1}/{w}"] = arr
    first = next(iter(fields.values()))
    metadata = {
        "id": sample_id,
        "fields": sorted(fields),
        "windows": [w.window.model_dump(mode="json") for w in first.wells],
        "locations": [list(w.location) if w.location is not None else None for w in first.wells],
        "geometry": first.geometry.model_dump(mode="json"),
    }
    write_records(path, [(metadata, tensors)])


def read_fields(path: PathLike) -> tuple[int, dict[str, CompositeField]]:
    """
    Inverse of ``write_fields``.

    Raises:
        DatasetIOError: If the file is missing or holds no record.
    """
    records = read_records(path)
    if not records:
        raise DatasetIOError(f"{path} holds no field record")
    metadata, tensors = records[0]
    geometry = NestedGeometry.model_validate(metadata["geometry"])
    windows = [Box.model_validate(b) for b in metadata["windows"]]
    locations = [tuple(loc) if loc is not None else None for loc in metadata.get("locations", [None] * len(windows))]
    fields = {}
    for name in metadata["fields"]:
        wells = []
        for w, window in enumerate(windows):
            levels = []
            while f"{name}/{len(levels) + 1}/{w}" in tensors:
                levels.append(tensors[f"{name}/{len(levels) + 1}/{w}"])
            wells.append(WellLevels(window=window, levels=levels, location=locations[w]))
        fields[name] = CompositeField(geometry=geometry, level0=tensors[f"{name}/0"], wells=wells)
    return int(metadata["id"]), fields


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def colorize(values: np.ndarray, cmap: str = "viridis", vmin: Optional[float] = None,
             vmax: Optional[float] = None) -> np.ndarray:
    """Map a 2D array to ``(rows, cols, 3)`` uint8 RGB; a constant array maps to one color."""
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if vmin is None else vmin
    hi = float(values.max()) if vmax is None else vmax
    scaled = np.zeros_like(values) if hi <= lo else np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    rgba = colormaps[cmap](scaled, bytes=True)
    return np.ascontiguousarray(rgba[..., :3])


def write_ppm(path: PathLike, values: np.ndarray, cmap: str = "viridis", vmin: Optional[float] = None,
              vmax: Optional[float] = None) -> Path:
    """Binary P6 heatmap of a 2D slice: height = ``values.shape[0]``, width = ``values.shape[1]``."""
    if values.ndim != 2:
        raise ShapeError(f"heatmaps need a 2D slice, got shape {values.shape}")
    rgb = colorize(values, cmap, vmin, vmax)
    height, width = values.shape
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes())
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e
    return path


def write_slice_csv(path: PathLike, values: np.ndarray) -> Path:
    """Raw slice values, one CSV row per image row."""
    return _write_csv(pd.DataFrame(np.asarray(values, dtype=np.float64)), path, header=False)


def _slice_row(geometry: NestedGeometry, well: WellLevels, level: int, ny: int) -> int:
    if well.location is None:
        return ny // 2
    column = well_columns(geometry, well.window, well.location, level)[level - 1]
    return min(max(column[1], 0), ny - 1)


def plot_fields(fields: dict[str, CompositeField], out_dir: PathLike, prefix: str = "sample",
                cmap: str = "viridis") -> list[Path]:
    """
    Heatmaps and CSV slices of every snapshot.

    Per field and snapshot: the top layer (x-y) of level 0, and per well and
    local level the x-z slice through the well column (the grid middle when
    the well location is unknown). Colors share one range per field and
    snapshot.
    """
    out_dir = Path(out_dir)
    written = []
    for name, composite in fields.items():
        for t in range(composite.level0.shape[0]):
            arrays = [composite.level0[t]] + [arr[t] for w in composite.wells for arr in w.levels]
            vmin = min(float(a.min()) for a in arrays)
            vmax = max(float(a.max()) for a in arrays)
            stem = f"{prefix}_{name}_t{t:02d}"
            top = composite.level0[t][:, :, 0]
            written.append(write_ppm(out_dir / f"{stem}_xy.ppm", top, cmap, vmin, vmax))
            written.append(write_slice_csv(out_dir / f"{stem}_xy.csv", top))
            for w, well in enumerate(composite.wells):
                for k, arr in enumerate(well.levels):
                    side = arr[t][:, _slice_row(composite.geometry, well, k + 1, arr.shape[2]), :]
                    base = out_dir / f"{stem}_w{w}_L{k + 1}_xz"
                    written.append(write_ppm(base.with_suffix(".ppm"), side, cmap, vmin, vmax))
                    written.append(write_slice_csv(base.with_suffix(".csv"), side))
    logger.info(f"🖼️ Wrote {len(written)} plot files to {out_dir}")
    return written
