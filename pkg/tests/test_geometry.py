"""Tests for grid transfer, windows and compositing."""

import numpy as np
import pytest

from src.errors import ContractError
from src.models import NestedGeometry, WellSpec
from src.services.geometry import (
    CompositeField,
    WellLevels,
    block_average,
    extract_window,
    inject,
    prolong_linear,
    resample_nearest,
    scale_box,
    well_columns,
    window_box,
)


def test_toy_grids(geometry):
    assert geometry.sim_grid == (40, 40, 5)
    assert [geometry.grid(k) for k in range(5)] == [(20, 20, 5)] + [(8, 8, 5)] * 4
    box = geometry.child_box(2)
    assert box.lo == (2, 2, 0) and box.hi == (6, 6, 5)


def test_window_is_centered_then_clamped(geometry):
    box = window_box(geometry, WellSpec(location=(10, 10), rate_schedule=[1.0]))
    assert box.lo == (8, 8, 0) and box.hi == (12, 12, 5)
    corner = window_box(geometry, WellSpec(location=(0, 19), rate_schedule=[1.0]))
    assert corner.lo == (0, 16, 0) and corner.hi == (4, 20, 5)


def test_window_rejects_well_outside_grid(geometry):
    with pytest.raises(ContractError):
        window_box(geometry, WellSpec(location=(20, 3), rate_schedule=[1.0]))


def test_extract_window_keeps_leading_axes(geometry, rng):
    field0 = rng.normal(size=(3, 20, 20, 5))
    window = extract_window(field0, WellSpec(location=(3, 3), rate_schedule=[1.0]), geometry)
    np.testing.assert_array_equal(window, field0[:, 1:5, 1:5, :])


def test_block_average_and_inject(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    fine = inject(x, (2, 3, 1))
    assert fine.shape == (2, 6, 12, 5)
    np.testing.assert_allclose(block_average(fine, (2, 3, 1)), x)
    with pytest.raises(ContractError):
        block_average(np.zeros((5, 4, 4)), (2, 2, 1))


def test_prolong_preserves_cell_averages_and_bounds(rng):
    x = rng.normal(size=(6, 5, 4))
    fine = prolong_linear(x, (2, 2, 3))
    assert fine.shape == (12, 10, 12)
    np.testing.assert_allclose(block_average(fine, (2, 2, 3)), x, atol=1e-12)
    assert fine.max() <= x.max() + 1e-12
    assert fine.min() >= x.min() - 1e-12


def test_prolong_is_exact_for_constant_fields():
    fine = prolong_linear(np.full((4, 4, 4), 3.5), (2, 2, 2))
    np.testing.assert_allclose(fine, 3.5)


def test_resample_nearest(rng):
    x = rng.normal(size=(2, 4, 4, 5))
    np.testing.assert_array_equal(resample_nearest(x, (4, 4, 5)), x)
    np.testing.assert_array_equal(resample_nearest(x, (8, 8, 5)), inject(x, (2, 2, 1)))


def nested_field(geometry, rng, n_t=2, n_wells=1, depth=4):
    level0 = rng.normal(size=(n_t,) + geometry.global_grid)
    locations = [(3, 3), (15, 15)][:n_wells]
    wells = [
        WellLevels(window=window_box(geometry, WellSpec(location=loc, rate_schedule=[1.0])),
                   levels=[rng.normal(size=(n_t,) + geometry.local_grid(k)) for k in range(1, depth + 1)])
        for loc in locations
    ]
    return CompositeField(geometry=geometry, level0=level0, wells=wells)


def test_composite_takes_finest_covering_value(geometry, rng):
    field = nested_field(geometry, rng)
    out = field.composite()
    finest = field.wells[0].levels[3]
    l3 = out.wells[0].levels[2]
    np.testing.assert_allclose(l3[:, 2:6, 2:6, :], block_average(finest, (2, 2, 1)))
    # cells outside every child box keep their own level's value
    np.testing.assert_array_equal(l3[:, :2], field.wells[0].levels[2][:, :2])
    np.testing.assert_array_equal(out.level0[:, 10:], field.level0[:, 10:])
    np.testing.assert_allclose(out.level0[:, 1:5, 1:5, :], block_average(out.wells[0].levels[0], (2, 2, 1)))


def test_composite_rejects_overlapping_windows(geometry, rng):
    field = nested_field(geometry, rng)
    overlapping = WellSpec(location=(4, 4), rate_schedule=[1.0])
    field.wells.append(WellLevels(window=window_box(geometry, overlapping), levels=[]))
    with pytest.raises(ContractError):
        field.composite()


def test_flatten_counts_each_cell_once(geometry, rng):
    field = nested_field(geometry, rng, n_wells=2)
    flat = field.composite().flatten()
    per_well_level0 = 4 * 4 * 5
    ring = (8 * 8 - 4 * 4) * 5
    expected = (20 * 20 * 5 - 2 * per_well_level0) + 2 * (3 * ring + 8 * 8 * 5)
    assert flat.shape == (2, expected)


def test_flatten_without_wells_is_level0(geometry, rng):
    field = CompositeField(geometry=geometry, level0=rng.normal(size=(1, 20, 20, 5)))
    assert field.depth == 0
    np.testing.assert_array_equal(field.flatten(), field.level0.reshape(1, -1))


def test_custom_refinement():
    geometry = NestedGeometry(global_grid=(10, 10, 2), window=(2, 2), footprint=(2, 2),
                              refinement=[(3, 3, 2), (2, 2, 1), (2, 2, 1), (2, 2, 1)])
    assert geometry.local_grid(1) == (6, 6, 4)
    assert geometry.local_grid(2) == (4, 4, 4)
    assert geometry.child_box(2).lo == (2, 2, 0)


def test_composite_is_idempotent(geometry, rng):
    once = nested_field(geometry, rng, n_wells=2).composite()
    twice = once.composite()
    np.testing.assert_allclose(twice.level0, once.level0, atol=1e-12)
    for a, b in zip(once.wells, twice.wells):
        for x, y in zip(a.levels, b.levels):
            np.testing.assert_allclose(y, x, atol=1e-12)


def test_well_column_stays_inside_every_child_box(geometry):
    well = WellSpec(location=(7, 12), rate_schedule=[1.0])
    window = window_box(geometry, well)
    columns = well_columns(geometry, window, well.location)
    assert columns == [(4, 4)] * 4
    for level in (2, 3, 4):
        box = geometry.child_box(level)
        assert all(box.lo[a] <= columns[level - 2][a] < box.hi[a] for a in (0, 1))


def test_well_column_of_a_clamped_window(geometry):
    well = WellSpec(location=(0, 19), rate_schedule=[1.0])
    columns = well_columns(geometry, window_box(geometry, well), well.location, depth=2)
    assert columns == [(0, 6), (-4, 8)]
    assert scale_box(window_box(geometry, well), (2, 2, 1)).hi == (8, 40, 5)
