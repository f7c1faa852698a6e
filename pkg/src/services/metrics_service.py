"""
Evaluation metrics for pressure buildup and gas saturation.

``delta_p`` is the mean absolute pressure error normalized by the maximum
reservoir pressure of each snapshot. ``delta_s`` is the mean absolute
saturation error over plume cells, where a cell belongs to the plume when
the true saturation exceeds 0.01 or the predicted saturation exceeds 0.01 in
magnitude. ``delta_s`` is undefined (``None``) when no cell is in the plume.

Per-level values for the local levels pool every well's box into one cell
set; totals are taken over the composited domain, each cell counted once at
its finest covering level.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Iterable, Optional

import numpy as np

from src.errors import ContractError, ShapeError
from src.models import MetricEntry, MetricsReport

logger = logging.getLogger(__name__)

PLUME_THRESHOLD = 0.01
FIELDS = ("pressure", "saturation")
METRIC_NAMES = {"pressure": "delta_p", "saturation": "delta_s"}


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")


def p_max_per_time(abs_pressure: np.ndarray) -> np.ndarray:
    """Maximum over the whole reservoir at each snapshot, shape ``(T,)``."""
    if abs_pressure.size == 0:
        raise ContractError("p_max_per_time needs a nonempty field")
    return abs_pressure.reshape(abs_pressure.shape[0], -1).max(axis=1)


def delta_p(pred: np.ndarray, truth: np.ndarray, p_max: np.ndarray) -> float:
    """
    Normalized pressure error.

    Args:
        pred: Predicted pressure buildup ``(T, ...)``.
        truth: True pressure buildup ``(T, ...)``.
        p_max: Maximum reservoir pressure per snapshot ``(T,)``.

    Returns:
        ``mean_t mean_i |P - P_hat| / P_max[t]``.

    Raises:
        ShapeError: If shapes disagree.
        ContractError: If any ``p_max`` entry is not positive.
    """
    _check_pair(pred, truth)
    p_max = np.asarray(p_max, dtype=np.float64)
    if p_max.shape != (truth.shape[0],):
        raise ShapeError(f"p_max has shape {p_max.shape}, expected ({truth.shape[0]},)")
    if np.any(p_max <= 0):
        raise ContractError("maximum reservoir pressure must be positive at every snapshot")
    err = np.abs(pred - truth).reshape(truth.shape[0], -1)
    return float(np.mean(err / p_max[:, None]))


def plume_indicator(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    # truth is compared signed, prediction by magnitude
    return (truth > PLUME_THRESHOLD) | (np.abs(pred) > PLUME_THRESHOLD)


def delta_s(pred: np.ndarray, truth: np.ndarray) -> Optional[float]:
    """Mean absolute saturation error over plume cells, ``None`` for an empty plume."""
    _check_pair(pred, truth)
    mask = plume_indicator(pred, truth)
    n = int(mask.sum())
    if n == 0:
        return None
    return float(np.abs(pred - truth)[mask].sum() / n)


def totals(composite_pred: np.ndarray, composite_truth: np.ndarray, p_max: Optional[np.ndarray],
           field: str) -> MetricEntry:
    """
    Total metric over a de-duplicated composite cell set ``(T, n_cells)``.

    ``p_max`` is required for pressure and ignored for saturation.
    """
    return level_entry(field, "total", [composite_pred], [composite_truth], p_max)


def level_entry(field: str, level: str, preds: list[np.ndarray], truths: list[np.ndarray],
                p_max: Optional[np.ndarray]) -> MetricEntry:
    """One sample's metric over the union of ``preds``/``truths`` (e.g. every well's box)."""
    if len(preds) != len(truths) or not preds:
        raise ContractError(f"level {level}: need matching nonempty prediction and truth lists")
    n_t = truths[0].shape[0]
    pred = np.concatenate([p.reshape(n_t, -1) for p in preds], axis=1)
    truth = np.concatenate([t.reshape(n_t, -1) for t in truths], axis=1)
    n_cells = truth.shape[1]
    if field == "pressure":
        if p_max is None:
            raise ContractError("pressure metrics need p_max")
        return MetricEntry(field=field, level=level, metric="delta_p", value=delta_p(pred, truth, p_max),
                           n_cells=n_cells, n_samples=1)
    value = delta_s(pred, truth)
    plume = int(plume_indicator(pred, truth).sum())
    return MetricEntry(field=field, level=level, metric="delta_s", value=value, n_cells=n_cells,
                       plume_cells=plume, n_samples=0 if value is None else 1)


def summarize(values: Iterable[Optional[float]]) -> dict[str, Optional[float]]:
    """Mean, median and quartiles of the defined values."""
    defined = np.array([v for v in values if v is not None], dtype=np.float64)
    if defined.size == 0:
        return {"mean": None, "median": None, "q1": None, "q3": None, "n": 0}
    q1, median, q3 = np.percentile(defined, [25, 50, 75])
    return {"mean": float(defined.mean()), "median": float(median), "q1": float(q1), "q3": float(q3),
            "n": int(defined.size)}


class MetricsAccumulator:
    """
    Collects per-sample entries and reduces them to a ``MetricsReport``.

    Sample-level values are averaged across samples; undefined saturation
    values are skipped, and a (field, level) with no defined sample stays
    undefined in the report.
    """

    def __init__(self, mode: str = "sequential"):
        self.mode = mode
        self._entries: dict[tuple[str, str], list[MetricEntry]] = defaultdict(list)
        self._samples: set[int] = set()

    def add(self, sample_id: int, entry: MetricEntry) -> None:
        self._samples.add(sample_id)
        self._entries[(entry.field, entry.level)].append(entry)
        if entry.value is None:
            logger.warning(f"⚠️ {entry.metric} undefined for sample {sample_id} at level {entry.level} (empty plume)")

    def values(self, field: str, level: str) -> list[Optional[float]]:
        return [e.value for e in self._entries.get((field, level), [])]

    def report(self) -> MetricsReport:
        rows = []
        for (field, level), entries in sorted(self._entries.items(), key=lambda kv: (kv[0][0], _level_key(kv[0][1]))):
            stats = summarize(e.value for e in entries)
            plume = [e.plume_cells for e in entries if e.plume_cells is not None]
            rows.append(MetricEntry(
                field=field, level=level, metric=METRIC_NAMES[field], value=stats["mean"],
                n_cells=sum(e.n_cells for e in entries), plume_cells=sum(plume) if plume else None,
                n_samples=stats["n"], median=stats["median"], q1=stats["q1"], q3=stats["q3"],
            ))
        return MetricsReport(mode=self.mode, entries=rows, n_samples=len(self._samples))


def _level_key(level: str) -> tuple[int, str]:
    # "total" first, then levels in order
    return (-1, level) if level == "total" else (int(level), level)


def all_saturation_undefined(report: MetricsReport) -> bool:
    saturation = [e for e in report.entries if e.field == "saturation"]
    return bool(saturation) and all(e.value is None for e in saturation)
