"""
Shared fixtures: synthetic samples built from smooth random fields, so
pipeline tests do not need the reservoir solver.
"""

from typing import Optional, Sequence

import numpy as np
import pytest

from src.models import NestedGeometry, SimConfig, TimeGrid, WellSpec
from src.services.geometry import block_average, crop_box, prolong_linear, scale_box, window_box
from src.services.synth_data import (
    LocalTruth,
    ReservoirSample,
    extract_levels,
    gen_permeability,
    static_channels,
)
from src.services.tracing_service import tracing_service

# disjoint level-1 windows on the default 20x20 level-0 grid
QUADRANT_WELLS = ((3, 3), (15, 4), (4, 15), (15, 15))


def refined_chain(level1: np.ndarray, geometry: NestedGeometry, rng: np.random.Generator, max_level: int,
                  detail: float = 0.1, ceiling: Optional[float] = None) -> list[np.ndarray]:
    """Levels 2..max_level: the prolonged parent with positive multiplicative detail."""
    chain = []
    parent = level1
    for level in range(2, max_level + 1):
        ratio = geometry.refinement[level - 1]
        fine = crop_box(prolong_linear(parent, ratio), scale_box(geometry.child_box(level), ratio))
        fine = fine * np.exp(detail * rng.standard_normal(fine.shape))
        if ceiling is not None:
            fine = np.minimum(fine, ceiling)
        chain.append(fine)
        parent = fine
    return chain


def make_sample(
    sample_id: int = 0,
    locations: Sequence[tuple[int, int]] = QUADRANT_WELLS,
    n_t: int = 4,
    seed: int = 0,
    rates: Optional[Sequence[float]] = None,
    mean_ln_permeability: float = 1.1,
    max_level: int = 4,
    geometry: Optional[NestedGeometry] = None,
) -> ReservoirSample:
    """A reservoir whose truth is a smooth random field growing with time."""
    geometry = geometry or NestedGeometry()
    rates = rates or [1.0 + 0.25 * i for i in range(len(locations))]
    times = TimeGrid(snapshots=[float(t) for t in np.linspace(1.0, 30.0, n_t)])
    wells = [WellSpec(location=loc, rate_schedule=[r]) for loc, r in zip(locations, rates)]
    config = SimConfig(wells=wells, times=times, seed=seed, mean_ln_permeability=mean_ln_permeability)

    grid = geometry.sim_grid
    rng = np.random.default_rng(seed)
    perm = gen_permeability(seed, grid, mean_ln_permeability, 0.3, 3.0)
    static = static_channels(config, perm, geometry.refinement[0])
    growth = (times.years() / 30.0)[:, None, None, None]
    pressure = growth * (5.0 + rng.random(grid))
    saturation = np.where(rng.random((n_t,) + grid) < 0.3, 0.8 * rng.random((n_t,) + grid), 0.0)

    windows = [window_box(geometry, w) for w in wells]
    scaled = [scale_box(b, geometry.refinement[0]) for b in windows]
    static_local = [
        ([crop_box(static, box)] + refined_chain(crop_box(static, box), geometry, rng, max_level, detail=0.0))[:max_level]
        for box in scaled
    ]
    refined_p = [refined_chain(crop_box(pressure, box), geometry, rng, max_level) for box in scaled]
    refined_s = [refined_chain(crop_box(saturation, box), geometry, rng, max_level, ceiling=0.8) for box in scaled]
    static0 = block_average(static, geometry.refinement[0])
    p0, p_local = extract_levels(pressure, geometry, windows, max_level, refined_p)
    s0, s_local = extract_levels(saturation, geometry, windows, max_level, refined_s)
    absolute = static[2][None] + pressure
    local = [
        LocalTruth(well=w, window=b, static=st, pressure=p, saturation=s)
        for w, b, st, p, s in zip(wells, windows, static_local, p_local, s_local)
    ]
    return ReservoirSample(
        id=sample_id, config=config, geometry=geometry, static0=static0, pressure0=p0, saturation0=s0,
        p_max=absolute.reshape(n_t, -1).max(axis=1), wells=local,
        mean_ln_permeability=float(np.mean(static[0])),
    )


@pytest.fixture
def geometry() -> NestedGeometry:
    return NestedGeometry()


@pytest.fixture
def sample() -> ReservoirSample:
    return make_sample()


@pytest.fixture
def samples() -> list[ReservoirSample]:
    return [make_sample(i, QUADRANT_WELLS[: 1 + i % 4], seed=i) for i in range(4)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_traces():
    tracing_service.reset()
    yield
    tracing_service.reset()
