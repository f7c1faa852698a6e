"""Tests for the toy pressure solver and plume model."""

import numpy as np
import pytest

from src.errors import ContractError, SolverError
from src.models import SimConfig, TimeGrid, WellSpec
from src.services.reservoir_solver import cumulative_injection, rate_at, reservoir_solver
from src.services.synth_data import gen_permeability

GRID = (10, 10, 4)


def small_config(rate: float = 1.0, **overrides) -> SimConfig:
    well = WellSpec(location=(5, 5), perforation=(0, 4), rate_schedule=[rate])
    return SimConfig(wells=[well], times=TimeGrid(snapshots=[0.5, 1.0, 2.0]), **overrides)


@pytest.fixture
def permeability():
    return gen_permeability(1, GRID, 1.1, 0.3, 2.0)


def test_buildup_is_nonnegative_and_grows(permeability):
    result = reservoir_solver.simulate(small_config(), permeability)
    assert result.pressure_buildup.shape == (3,) + GRID
    assert np.all(result.pressure_buildup >= 0)
    assert result.pressure_buildup[2, 5, 5].mean() > result.pressure_buildup[0, 5, 5].mean()
    assert result.pressure_buildup[2, 5, 5, 0] > result.pressure_buildup[2, 0, 0, 0]


def test_buildup_is_linear_in_rate(permeability):
    single = reservoir_solver.simulate(small_config(1.0), permeability)
    double = reservoir_solver.simulate(small_config(2.0), permeability)
    np.testing.assert_allclose(double.pressure_buildup, 2 * single.pressure_buildup, rtol=1e-10, atol=1e-12)


def test_plume_volume_matches_injection(permeability):
    config = small_config()
    result = reservoir_solver.simulate(config, permeability)
    pore = config.porosity * float(np.prod(config.spacing))
    stored = result.saturation.reshape(3, -1).sum(axis=1) * pore
    np.testing.assert_allclose(stored, result.injected_volume, rtol=1e-10)
    np.testing.assert_allclose(result.injected_volume, [0.05, 0.1, 0.2])
    assert result.saturation.max() <= config.max_saturation + 1e-12
    assert np.all(np.diff(result.saturation.reshape(3, -1).sum(axis=1)) > 0)


def test_substep_budget(permeability):
    with pytest.raises(SolverError):
        reservoir_solver.simulate(small_config(max_substeps=2), permeability)


def test_wells_outside_the_grid(permeability):
    outside = SimConfig(wells=[WellSpec(location=(12, 3), perforation=(0, 4), rate_schedule=[1.0])],
                        times=TimeGrid(snapshots=[1.0]))
    with pytest.raises(ContractError):
        reservoir_solver.simulate(outside, permeability)
    too_deep = SimConfig(wells=[WellSpec(location=(3, 3), perforation=(0, 6), rate_schedule=[1.0])],
                         times=TimeGrid(snapshots=[1.0]))
    with pytest.raises(ContractError):
        reservoir_solver.simulate(too_deep, permeability)


def test_rate_schedule_periods():
    well = WellSpec(location=(0, 0), rate_schedule=[1.0, 3.0])
    assert rate_at(well, 5.0) == 1.0
    assert rate_at(well, 20.0) == 3.0
    assert rate_at(well, 40.0) == 3.0
    assert cumulative_injection(well, 20.0) == pytest.approx(15.0 + 15.0)


def test_zero_rate_gives_no_buildup_or_plume(permeability):
    result = reservoir_solver.simulate(small_config(0.0), permeability)
    np.testing.assert_array_equal(result.pressure_buildup, 0.0)
    np.testing.assert_array_equal(result.saturation, 0.0)


def test_homogeneous_buildup_is_symmetric_in_x_and_y():
    grid = (9, 9, 4)
    config = SimConfig(wells=[WellSpec(location=(4, 4), perforation=(0, 4), rate_schedule=[1.0])],
                       times=TimeGrid(snapshots=[0.5, 1.0]))
    result = reservoir_solver.simulate(config, np.full(grid, 3.0))
    np.testing.assert_allclose(result.pressure_buildup, result.pressure_buildup.transpose(0, 2, 1, 3), atol=1e-10)
    np.testing.assert_allclose(result.pressure_buildup, result.pressure_buildup[:, ::-1], atol=1e-10)


LOCAL_GRID = (6, 6, 3)
LOCAL_SPACING = (0.5, 0.5, 0.25)


def local_boundary(config: SimConfig, value: float) -> np.ndarray:
    return np.full((config.times.n_t,) + (LOCAL_GRID[0] + 2, LOCAL_GRID[1] + 2, LOCAL_GRID[2]), value)


def test_local_solve_without_sources_or_boundary_stays_zero():
    config = small_config(0.0)
    k = np.full(LOCAL_GRID, np.e)
    out = reservoir_solver.solve_local(config, k, LOCAL_SPACING, local_boundary(config, 0.0),
                                       (config.wells[0], 2, 2, [0, 1, 2]))
    assert out.shape == (3,) + LOCAL_GRID
    np.testing.assert_array_equal(out, 0.0)


def test_local_solve_is_bounded_by_its_ring_and_grows():
    config = small_config()
    k = gen_permeability(2, LOCAL_GRID, 1.1, 0.3, 2.0)
    out = reservoir_solver.solve_local(config, k, LOCAL_SPACING, local_boundary(config, 4.0))
    assert out.min() >= -1e-12
    assert out.max() <= 4.0 + 1e-12
    assert np.all(np.diff(out, axis=0) >= -1e-12)
    assert out[0, 0].mean() > out[0, 2].mean() > 0


def test_local_source_peaks_at_its_column():
    config = small_config()
    k = gen_permeability(3, LOCAL_GRID, 1.1, 0.3, 2.0)
    out = reservoir_solver.solve_local(config, k, LOCAL_SPACING, local_boundary(config, 0.0),
                                       (config.wells[0], 2, 3, [0, 1, 2]))
    assert out.min() >= -1e-12
    assert out[-1, 2, 3].max() >= out[-1].max() - 1e-12
    assert out[-1, 2, 3].max() > 0


def test_local_solve_rejects_bad_inputs():
    config = small_config()
    k = np.full(LOCAL_GRID, 2.0)
    with pytest.raises(ContractError):
        reservoir_solver.solve_local(config, k, LOCAL_SPACING, np.zeros((3,) + LOCAL_GRID))
    with pytest.raises(ContractError):
        reservoir_solver.solve_local(config, k, LOCAL_SPACING, local_boundary(config, 0.0),
                                     (config.wells[0], 6, 0, [0]))
    with pytest.raises(ContractError):
        reservoir_solver.solve_local(config, -k, LOCAL_SPACING, local_boundary(config, 0.0))


def test_local_fill_conserves_the_plume_volume():
    config = small_config()
    k = gen_permeability(4, LOCAL_GRID, 1.1, 0.3, 2.0)
    pore = config.porosity * float(np.prod(LOCAL_SPACING))
    volumes = np.array([0.0, 0.01, 0.03])
    # the well column may sit outside the window
    for column in ((2, 2), (-3, 1)):
        out = reservoir_solver.fill_local(config, k, LOCAL_SPACING, volumes, column, [0, 1, 2])
        np.testing.assert_allclose(out.reshape(3, -1).sum(axis=1) * pore, volumes, rtol=1e-10, atol=1e-15)
        assert out.min() >= 0.0
        assert out.max() <= config.max_saturation + 1e-12


def test_local_fill_over_capacity():
    config = small_config()
    k = np.full(LOCAL_GRID, 2.0)
    capacity = config.max_saturation * config.porosity * float(np.prod(LOCAL_SPACING)) * k.size
    full = reservoir_solver.fill_local(config, k, LOCAL_SPACING, np.array([capacity]), (2, 2), [0])
    np.testing.assert_allclose(full, config.max_saturation)
    with pytest.raises(ContractError):
        reservoir_solver.fill_local(config, k, LOCAL_SPACING, np.array([1.5 * capacity]), (2, 2), [0])
