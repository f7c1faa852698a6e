"""Tests for synthetic reservoir generation, level extraction and dataset splits."""

import numpy as np
import pytest

from src.errors import ContractError
from src.models import Box, GenConfig, SimConfig, TimeGrid
from src.services.geometry import block_average, crop_box, prolong_linear, scale_box
from src.services.reservoir_solver import cumulative_injection
from src.services.synth_data import (
    extract_levels,
    gen_permeability,
    ln_permeability_detail,
    permeability_group,
    read_dataset,
    synth_data_service,
    train_test_split,
    write_dataset,
)
from tests.conftest import make_sample


def test_permeability_statistics_and_determinism():
    a = gen_permeability(3, (16, 12, 4), 1.2, 0.5, 3.0)
    b = gen_permeability(3, (16, 12, 4), 1.2, 0.5, 3.0)
    np.testing.assert_array_equal(a, b)
    assert np.all(a > 0)
    assert np.mean(np.log(a)) == pytest.approx(1.2, abs=1e-10)
    assert np.std(np.log(a)) == pytest.approx(0.5, rel=1e-10)
    assert not np.array_equal(a, gen_permeability(4, (16, 12, 4), 1.2, 0.5, 3.0))


def test_homogeneous_permeability():
    k = gen_permeability(0, (4, 4, 2), 1.0, 0.0, 3.0)
    np.testing.assert_allclose(k, np.e)


def test_levels_are_consistent_with_their_parents(sample):
    geometry = sample.geometry
    for w, local in enumerate(sample.wells):
        window = local.window.slices()
        np.testing.assert_allclose(block_average(local.pressure[0], geometry.refinement[0]),
                                   sample.pressure0[(Ellipsis,) + window], atol=1e-12)
        for k in range(1, len(local.pressure)):
            box = geometry.child_box(k + 1).slices()
            np.testing.assert_allclose(block_average(local.pressure[k], geometry.refinement[k]),
                                       local.pressure[k - 1][(Ellipsis,) + box], atol=1e-12)
            assert local.static[k].shape == (4,) + geometry.local_grid(k + 1)


def test_sample_accessors(sample):
    assert sample.n_wells == 4
    assert sample.max_level == 4
    assert sample.max_rate == pytest.approx(1.75)
    assert sample.truth("pressure", 0).shape == (4, 20, 20, 5)
    assert sample.truth("saturation", 2, well=3).shape == (4, 8, 8, 5)
    trimmed = sample.select_times([0, 2])
    assert trimmed.times.n_t == 2
    np.testing.assert_array_equal(trimmed.truth("pressure", 1, 0), sample.truth("pressure", 1, 0)[[0, 2]])


def test_sample_config_is_deterministic_with_disjoint_windows():
    gen = GenConfig(n_samples=5, seed=9)
    for i in range(5):
        a = synth_data_service.sample_config(gen, i)
        assert a == synth_data_service.sample_config(gen, i)
        assert 1 <= len(a.wells) <= 4
        for j, w in enumerate(a.wells):
            for other in a.wells[j + 1:]:
                assert (w.location[0] < 10) != (other.location[0] < 10) or (w.location[1] < 10) != (other.location[1] < 10)
    assert synth_data_service.sample_config(gen, 0) != synth_data_service.sample_config(gen, 1)


def test_generated_sample_end_to_end():
    physics = SimConfig(times=TimeGrid(snapshots=[0.5, 1.0]))
    gen = GenConfig(n_samples=1, seed=2, max_level=2, physics=physics)
    (sample,) = synth_data_service.generate(gen)
    assert sample.max_level == 2
    assert sample.pressure0.shape == (2, 20, 20, 5)
    assert np.all(sample.pressure0 >= 0)
    assert np.all(sample.p_max > 0)
    assert sample.saturation0.max() > 0


def test_dataset_roundtrip(tmp_path, samples):
    path = tmp_path / "dataset.ngcs"
    write_dataset(path, samples)
    loaded = read_dataset(path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        assert a.config == b.config
        assert a.max_level == b.max_level
        np.testing.assert_array_equal(a.pressure0, b.pressure0)
        np.testing.assert_array_equal(a.wells[-1].saturation[-1], b.wells[-1].saturation[-1])
        assert [w.window for w in a.wells] == [w.window for w in b.wells]


def test_train_test_split_sizes_and_determinism():
    samples = [make_sample(i, n_t=2, max_level=0) for i in range(10)]
    train, test = train_test_split(samples, 0.2, seed=5)
    assert len(test) == 2 and len(train) == 8
    assert {s.id for s in train} | {s.id for s in test} == set(range(10))
    again, _ = train_test_split(samples, 0.2, seed=5)
    assert [s.id for s in again] == [s.id for s in train]


def test_permeability_group():
    cutoffs = [1.02, 1.1, 1.25, 1.377]
    assert permeability_group(0.95, cutoffs) == 1
    assert permeability_group(1.02, cutoffs) == 2
    assert permeability_group(1.2, cutoffs) == 3
    assert permeability_group(1.5, cutoffs) == 5


@pytest.fixture(scope="module")
def refined_sample():
    physics = SimConfig(times=TimeGrid(snapshots=[0.5, 1.0]))
    gen = GenConfig(n_samples=1, seed=4, max_level=2, physics=physics)
    (sample,) = synth_data_service.generate(gen)
    return sample


def test_refined_truth_is_not_a_prolongation_of_its_parent(refined_sample):
    geometry = refined_sample.geometry
    ratio = geometry.refinement[1]
    box = scale_box(geometry.child_box(2), ratio)
    for local in refined_sample.wells:
        for parent, child in ((local.pressure[0], local.pressure[1]), (local.saturation[0], local.saturation[1]),
                              (local.static[0][0], local.static[1][0])):
            assert child.shape[-3:] == geometry.local_grid(2)
            assert not np.allclose(crop_box(prolong_linear(parent, ratio), box), child, atol=1e-6)


def test_generated_levels_are_restrictions_of_the_finest_level(refined_sample):
    geometry = refined_sample.geometry
    inner = geometry.child_box(2).slices()
    for local in refined_sample.wells:
        np.testing.assert_allclose(block_average(local.pressure[1], geometry.refinement[1]),
                                   local.pressure[0][(Ellipsis,) + inner], atol=1e-12)
        np.testing.assert_allclose(block_average(local.saturation[1], geometry.refinement[1]),
                                   local.saturation[0][(Ellipsis,) + inner], atol=1e-12)
        np.testing.assert_allclose(block_average(local.pressure[0], geometry.refinement[0]),
                                   refined_sample.pressure0[(Ellipsis,) + local.window.slices()], atol=1e-12)
        # ln k detail has zero mean over every parent cell
        np.testing.assert_allclose(block_average(local.static[1][0], geometry.refinement[1]),
                                   local.static[0][0][inner], atol=1e-10)
        assert local.pressure[1].min() >= -1e-12
        assert local.saturation[1].max() <= refined_sample.config.max_saturation + 1e-12
    peaks = [np.max(s[2][None] + p, axis=(1, 2, 3)) for local in refined_sample.wells
             for s, p in zip(local.static, local.pressure)]
    assert np.all(refined_sample.p_max >= np.max(peaks, axis=0) - 1e-9)


def test_restricted_plume_keeps_the_injected_volume(refined_sample):
    geometry = refined_sample.geometry
    config = refined_sample.config
    cell = float(np.prod(config.spacing)) * float(np.prod(geometry.refinement[0]))
    stored = refined_sample.saturation0.reshape(2, -1).sum(axis=1) * config.porosity * cell
    injected = [sum(cumulative_injection(w, t) for w in config.wells) * config.volume_per_mt for t in (0.5, 1.0)]
    np.testing.assert_allclose(stored, injected, rtol=1e-9)


def test_ln_permeability_detail_has_zero_block_mean():
    detail = ln_permeability_detail(np.random.default_rng(0), (8, 8, 5), (2, 2, 1), 0.3)
    np.testing.assert_allclose(block_average(detail, (2, 2, 1)), 0.0, atol=1e-14)
    assert detail.std() > 0.05


def test_extract_levels_needs_refined_truth(geometry):
    fine = np.zeros((2,) + geometry.sim_grid)
    windows = [Box(lo=(0, 0, 0), hi=(4, 4, 5))]
    with pytest.raises(ContractError):
        extract_levels(fine, geometry, windows, max_level=2)
    with pytest.raises(ContractError):
        extract_levels(fine, geometry, windows, max_level=2, refined=[[np.zeros((2, 4, 4, 5))]])
    level0, (levels,) = extract_levels(fine, geometry, windows, max_level=1)
    assert level0.shape == (2,) + geometry.global_grid
    assert levels[0].shape == (2,) + geometry.local_grid(1)


def test_extract_levels_of_constant_and_linear_fields(geometry):
    windows = [Box(lo=(2, 2, 0), hi=(6, 6, 5))]
    refined = [[np.full((3,) + geometry.local_grid(k), 2.5) for k in (2, 3)]]
    level0, (levels,) = extract_levels(np.full((3,) + geometry.sim_grid, 2.5), geometry, windows, 3, refined)
    for arr in [level0] + levels:
        np.testing.assert_allclose(arr, 2.5)

    # solver cells i = 2I and 2I + 1 average to the level-0 midpoint 2I + 0.5
    x = np.broadcast_to(np.arange(geometry.sim_grid[0], dtype=float)[:, None, None], geometry.sim_grid)
    level0, _ = extract_levels(x, geometry, windows, max_level=0)
    np.testing.assert_allclose(level0[:, 0, 0], 2 * np.arange(geometry.global_grid[0]) + 0.5)
