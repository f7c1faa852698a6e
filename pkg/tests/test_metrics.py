"""Tests for the pressure and saturation error metrics."""

import numpy as np
import pytest

from src.errors import ContractError, ShapeError
from src.services.metrics_service import (
    MetricsAccumulator,
    all_saturation_undefined,
    delta_p,
    delta_s,
    level_entry,
    p_max_per_time,
    totals,
)


def loop_delta_p(pred, truth, p_max):
    total, count = 0.0, 0
    for t in range(truth.shape[0]):
        for a, b in zip(pred[t].ravel(), truth[t].ravel()):
            total += abs(a - b) / p_max[t]
            count += 1
    return total / count


def loop_delta_s(pred, truth):
    num, den = 0.0, 0
    for a, b in zip(pred.ravel(), truth.ravel()):
        if b > 0.01 or abs(a) > 0.01:
            num += abs(a - b)
            den += 1
    return None if den == 0 else num / den


def test_delta_p_matches_direct_loop(rng):
    for _ in range(10):
        truth = rng.random((3, 4, 3, 2)) * 50
        pred = truth + rng.normal(size=truth.shape)
        p_max = 100 + rng.random(3) * 50
        assert delta_p(pred, truth, p_max) == pytest.approx(loop_delta_p(pred, truth, p_max), rel=1e-12)


def test_delta_s_matches_direct_loop(rng):
    for _ in range(10):
        truth = np.where(rng.random((2, 5, 5, 3)) < 0.3, rng.random((2, 5, 5, 3)), 0.0)
        pred = truth + 0.02 * rng.normal(size=truth.shape)
        assert delta_s(pred, truth) == pytest.approx(loop_delta_s(pred, truth), rel=1e-12)


def test_negative_prediction_counts_by_magnitude():
    truth = np.zeros((1, 2, 1, 1))
    pred = np.array([-0.5, 0.0]).reshape(1, 2, 1, 1)
    assert delta_s(pred, truth) == pytest.approx(0.5)


def test_empty_plume_is_undefined():
    zeros = np.zeros((2, 3, 3, 3))
    assert delta_s(zeros, zeros) is None
    entry = level_entry("saturation", "0", [zeros], [zeros], None)
    assert entry.undefined and entry.n_samples == 0 and entry.plume_cells == 0


def test_delta_p_contract_errors():
    x = np.ones((2, 3, 3, 3))
    with pytest.raises(ContractError):
        delta_p(x, x, np.array([1.0, 0.0]))
    with pytest.raises(ShapeError):
        delta_p(x, np.ones((2, 3, 3, 2)), np.ones(2))
    with pytest.raises(ShapeError):
        delta_p(x, x, np.ones(3))


def test_p_max_per_time(rng):
    field = rng.random((3, 4, 4, 2))
    np.testing.assert_array_equal(p_max_per_time(field), [field[t].max() for t in range(3)])


def test_level_entry_pools_wells(rng):
    truths = [rng.random((2, 4, 4, 2)), rng.random((2, 4, 4, 2))]
    preds = [t + 0.1 for t in truths]
    entry = level_entry("pressure", "1", preds, truths, np.full(2, 10.0))
    assert entry.n_cells == 64
    assert entry.value == pytest.approx(0.01)


def test_accumulator_reduces_across_samples():
    acc = MetricsAccumulator(mode="separate")
    truth = np.zeros((1, 4, 1, 1))
    for sample_id, err in enumerate([0.1, 0.2, 0.3, 0.4]):
        acc.add(sample_id, level_entry("pressure", "0", [truth + err], [truth], np.ones(1)))
    acc.add(0, level_entry("saturation", "1", [truth], [truth], None))
    report = acc.report()
    entry = report.get("pressure", "0")
    assert report.mode == "separate" and report.n_samples == 4
    assert entry.value == pytest.approx(0.25)
    assert entry.median == pytest.approx(0.25)
    assert entry.q1 == pytest.approx(0.175)
    assert entry.q3 == pytest.approx(0.325)
    assert report.value("saturation", "1") is None
    assert all_saturation_undefined(report)


def test_totals_match_direct_metrics(rng):
    truth = rng.random((3, 50))
    pred = truth + rng.normal(scale=0.05, size=truth.shape)
    p_max = np.array([2.0, 3.0, 4.0])
    entry = totals(pred, truth, p_max, "pressure")
    assert entry.level == "total" and entry.n_cells == 50
    assert entry.value == pytest.approx(delta_p(pred, truth, p_max))

    saturation = totals(pred, truth, None, "saturation")
    assert saturation.metric == "delta_s"
    assert saturation.value == pytest.approx(delta_s(pred, truth))
    with pytest.raises(ContractError):
        totals(pred, truth, None, "pressure")
