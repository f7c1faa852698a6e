"""
Synthetic nested dataset.

Each sample is one random reservoir: a log-normal permeability field drawn
in spectral space, depth-dependent temperature and hydrostatic initial
pressure, and 1-4 injection wells placed one per quadrant so their level-1
windows never overlap. The toy solver runs on the solver grid (level-0
cells refined to level-1 resolution) and level 1 is a window of it. Levels
2-4 are solved locally on their own grids: ln k is the prolonged parent
plus zero-mean detail, pressure a backward-Euler solve with the parent on
the lateral ring, and saturation the parent plume volume refilled by
invasion order. Coarser levels and level 0 are then block averages of the
finest level covering each cell.

Branch input channels (static, per level)::

    0  ln permeability (ln mD)
    1  temperature (deg C)
    2  initial pressure (bar)
    3  injection rate at perforated cells (MT/yr), 0 elsewhere

Local levels append the previous-level field as channel 4 when inputs are
assembled.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.errors import ContractError
from src.models import Box, GenConfig, NestedGeometry, SimConfig, TimeGrid, WellSpec
from src.services.geometry import block_average, crop_box, inject, prolong_linear, scale_box, well_columns, window_box
from src.services.reservoir_solver import reservoir_solver, well_cell
from src.services.tensor_core import fft3, ifft3
from src.utils.binary_io import read_records, write_records

logger = logging.getLogger(__name__)

STATIC_CHANNELS = ("ln_permeability", "temperature", "initial_pressure", "injection_rate")
HYDROSTATIC_BAR_PER_M = 0.0981
SURFACE_PRESSURE_BAR = 1.01325

# fixed encoding scales: network inputs are channel / scale, outputs field / scale
STATIC_SCALES = (1.0, 100.0, 500.0, 2.0)
FIELD_SCALES = {"pressure": 100.0, "saturation": 1.0}

Spacing = tuple[float, float, float]


@dataclass
class LocalTruth:
    """Level 1..max_level tensors around one well (list index 0 is level 1)."""

    well: WellSpec
    window: Box
    static: list[np.ndarray] = field(default_factory=list)
    pressure: list[np.ndarray] = field(default_factory=list)
    saturation: list[np.ndarray] = field(default_factory=list)


@dataclass
class ReservoirSample:
    """
    One reservoir with ground truth on every stored level.

    Attributes:
        static0: Level-0 static channels ``(4, *global_grid)``.
        pressure0, saturation0: Level-0 truth ``(T, *global_grid)``.
        p_max: Maximum absolute reservoir pressure per snapshot ``(T,)``.
        wells: Local-level truth per well.
    """

    id: int
    config: SimConfig
    geometry: NestedGeometry
    static0: np.ndarray
    pressure0: np.ndarray
    saturation0: np.ndarray
    p_max: np.ndarray
    wells: list[LocalTruth] = field(default_factory=list)
    mean_ln_permeability: float = 0.0

    @property
    def n_wells(self) -> int:
        return len(self.config.wells)

    @property
    def max_rate(self) -> float:
        return max((w.max_rate for w in self.config.wells), default=0.0)

    @property
    def times(self) -> TimeGrid:
        return self.config.times

    @property
    def max_level(self) -> int:
        return min((len(w.pressure) for w in self.wells), default=0)

    def truth(self, field_kind: str, level: int, well: Optional[int] = None) -> np.ndarray:
        if level == 0:
            if field_kind == "pressure":
                return self.pressure0
            return self.saturation0
        local = self.wells[well if well is not None else 0]
        arrays = local.pressure if field_kind == "pressure" else local.saturation
        if level > len(arrays):
            raise ContractError(f"sample {self.id} stores no level {level}")
        return arrays[level - 1]

    def static(self, level: int, well: Optional[int] = None) -> np.ndarray:
        if level == 0:
            return self.static0
        return self.wells[well if well is not None else 0].static[level - 1]

    def metadata(self) -> dict:
        return {
            "id": self.id,
            "n_wells": self.n_wells,
            "mean_ln_permeability": self.mean_ln_permeability,
            "max_rate": self.max_rate,
            "max_level": self.max_level,
        }

    def select_times(self, indices) -> "ReservoirSample":
        """Copy restricted to the snapshots at ``indices``."""
        idx = list(indices)
        config = self.config.model_copy(update={"times": self.config.times.subset(idx)})
        wells = [
            LocalTruth(well=w.well, window=w.window, static=w.static,
                       pressure=[a[idx] for a in w.pressure], saturation=[a[idx] for a in w.saturation])
            for w in self.wells
        ]
        return ReservoirSample(id=self.id, config=config, geometry=self.geometry, static0=self.static0,
                               pressure0=self.pressure0[idx], saturation0=self.saturation0[idx],
                               p_max=self.p_max[idx], wells=wells, mean_ln_permeability=self.mean_ln_permeability)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


def gen_permeability(seed: int, grid: tuple[int, int, int], mean_ln_md: float, std: float,
                     correlation_length: float) -> np.ndarray:
    """
    Log-normal permeability field (mD).

    White noise is filtered with a Gaussian kernel in spectral space,
    standardized, then scaled so ``ln k`` has sample mean ``mean_ln_md`` and
    sample standard deviation ``std``.

    Raises:
        ContractError: If ``std`` is negative.
    """
    if std < 0:
        raise ContractError(f"permeability std must be >= 0, got {std}")
    if std == 0:
        return np.full(grid, math.exp(mean_ln_md))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid)
    freqs = np.meshgrid(*(np.fft.fftfreq(n) for n in grid), indexing="ij")
    radius2 = sum(f * f for f in freqs)
    kernel = np.exp(-2.0 * (math.pi * correlation_length) ** 2 * radius2)
    smooth = ifft3(fft3(noise) * kernel)
    spread = smooth.std()
    gaussian = (smooth - smooth.mean()) / (spread if spread > 0 else 1.0)
    return np.exp(mean_ln_md + std * gaussian)


def _cell_depths_m(config: SimConfig, grid: tuple[int, int, int], spacing: Optional[Spacing] = None,
                   origin: Spacing = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Depth of every cell center; ``origin`` is the grid's low corner (km) from the solver-grid origin."""
    dx, _, dz = spacing or config.spacing
    x = origin[0] + dx * (np.arange(grid[0]) + 0.5)[:, None, None]
    z = origin[2] + dz * (np.arange(grid[2]) + 0.5)[None, None, :]
    dip = math.tan(math.radians(config.dip_deg))
    depth = config.depth_m + 1000.0 * (z + x * dip)
    return np.broadcast_to(depth, grid)


def _static_stack(config: SimConfig, ln_permeability: np.ndarray, depth: np.ndarray, rate: np.ndarray) -> np.ndarray:
    temperature = config.temperature_c + config.geothermal_gradient * (depth - config.depth_m) / 1000.0
    pressure = SURFACE_PRESSURE_BAR + HYDROSTATIC_BAR_PER_M * depth
    return np.stack([ln_permeability, temperature, pressure, rate])


def static_channels(config: SimConfig, permeability: np.ndarray, well_scale: tuple[int, int, int]) -> np.ndarray:
    """The four static input channels on the solver grid, ``(4, nx, ny, nz)``."""
    grid = permeability.shape
    rate = np.zeros(grid)
    sz = well_scale[2]
    for well in config.wells:
        cx, cy = well_cell(well.location, well_scale)
        rate[cx, cy, well.perforation[0] * sz:well.perforation[1] * sz] = well.mean_rate
    return _static_stack(config, np.log(permeability), _cell_depths_m(config, grid), rate)


def ln_permeability_detail(rng: np.random.Generator, grid: tuple[int, int, int], ratio: tuple[int, int, int],
                           std: float) -> np.ndarray:
    """Gaussian ln k detail on a refined grid whose average over every ``ratio`` block is zero."""
    noise = std * rng.standard_normal(grid)
    return noise - inject(block_average(noise, ratio), ratio)


@dataclass
class RefinedWell:
    """Truth of levels 2..max_level around one well, each solved on its own grid."""

    static: list[np.ndarray] = field(default_factory=list)
    pressure: list[np.ndarray] = field(default_factory=list)
    saturation: list[np.ndarray] = field(default_factory=list)


def extract_levels(fine: np.ndarray, geometry: NestedGeometry, windows: list[Box], max_level: int = 4,
                   refined: Optional[list[list[np.ndarray]]] = None) -> tuple[np.ndarray, list[list[np.ndarray]]]:
    """
    Per-level tensors by restriction from the finest truth covering each cell.

    Level 1 starts as the solver-grid cells of each well's window and level
    ``k >= 2`` as ``refined[well][k - 2]``. Working from the deepest level
    up, every coarser level takes the block average of the next finer one
    on the box it covers, and level 0 is the block average of the result.

    Args:
        fine: ``(..., *geometry.sim_grid)``.
        geometry: Nested geometry.
        windows: Level-1 window (level-0 coordinates) per well.
        max_level: Deepest local level to produce.
        refined: Per well, the arrays of levels ``2..max_level`` on their own grids.

    Raises:
        ContractError: If ``fine`` is not on the solver grid or a refined
            level is missing or off its grid.
    """
    if tuple(fine.shape[-3:]) != tuple(geometry.sim_grid):
        raise ContractError(f"field {fine.shape} is not on the solver grid {geometry.sim_grid}")
    if max_level >= 2 and (refined is None or len(refined) != len(windows)):
        raise ContractError(f"levels 2..{max_level} need refined truth for each of the {len(windows)} wells")
    r1 = geometry.refinement[0]
    sim = fine.copy()
    per_well = []
    for w, window in enumerate(windows):
        scaled = scale_box(window, r1)
        if max_level == 0:
            per_well.append([])
            continue
        deeper = list(refined[w]) if max_level >= 2 else []
        if len(deeper) < max_level - 1:
            raise ContractError(f"well {w}: {len(deeper)} refined levels, need {max_level - 1}")
        levels = [crop_box(sim, scaled)] + [a.copy() for a in deeper[:max_level - 1]]
        for level in range(2, max_level + 1):
            grid = geometry.local_grid(level)
            if tuple(levels[level - 1].shape[-3:]) != tuple(grid):
                raise ContractError(f"well {w} level {level}: {levels[level - 1].shape} is not on grid {grid}")
        for level in range(max_level, 1, -1):
            box = geometry.child_box(level)
            levels[level - 2][(Ellipsis,) + box.slices()] = block_average(levels[level - 1], geometry.refinement[level - 1])
        sim[(Ellipsis,) + scaled.slices()] = levels[0]
        per_well.append(levels)
    return block_average(sim, r1), per_well


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


class SynthDataService:
    """Draws reservoirs from a ``GenConfig`` and runs the toy solver on them."""

    def _uniform(self, rng: np.random.Generator, bounds: tuple[float, float]) -> float:
        lo, hi = bounds
        return float(lo) if lo == hi else float(rng.uniform(lo, hi))

    def _place_wells(self, gen: GenConfig, rng: np.random.Generator) -> list[WellSpec]:
        gx, gy, gz = gen.geometry.global_grid
        wx, wy = gen.geometry.window
        n_wells = int(rng.integers(gen.wells[0], gen.wells[1] + 1))
        wells = []
        for quadrant in rng.permutation(4)[:n_wells]:
            qx, qy = int(quadrant) % 2, int(quadrant) // 2
            x0, x1 = qx * (gx // 2), (gx // 2 if qx == 0 else gx)
            y0, y1 = qy * (gy // 2), (gy // 2 if qy == 0 else gy)
            lo_x = int(rng.integers(x0, x1 - wx + 1))
            lo_y = int(rng.integers(y0, y1 - wy + 1))
            rate = self._uniform(rng, gen.rate)
            wells.append(WellSpec(location=(lo_x + wx // 2, lo_y + wy // 2), perforation=(0, gz), rate_schedule=[rate]))
        return wells

    def sample_config(self, gen: GenConfig, sample_id: int) -> SimConfig:
        """Random reservoir description for ``sample_id``; its seed drives the permeability field."""
        rng = np.random.default_rng(np.random.SeedSequence([gen.seed, sample_id]))
        wells = self._place_wells(gen, rng)
        depth = self._uniform(rng, gen.depth_m)
        config = gen.physics.model_copy(update={
            "wells": wells,
            "mean_ln_permeability": self._uniform(rng, gen.mean_ln_permeability),
            "permeability_std": self._uniform(rng, gen.permeability_std),
            "correlation_length": self._uniform(rng, gen.correlation_length),
            "porosity": self._uniform(rng, gen.porosity),
            "depth_m": depth,
            "temperature_c": gen.surface_temperature_c + gen.physics.geothermal_gradient * depth / 1000.0,
            "seed": int(rng.integers(0, 2**31 - 1)),
        })
        return SimConfig.model_validate(config.model_dump())

    def refine_well(self, config: SimConfig, geometry: NestedGeometry, permeability: np.ndarray,
                    pressure: np.ndarray, saturation: np.ndarray, window: Box, well: WellSpec,
                    well_index: int, max_level: int = 4) -> RefinedWell:
        """
        Solve levels ``2..max_level`` around ``well``, each with its parent level as boundary.

        Args:
            config: Reservoir description.
            geometry: Nested geometry.
            permeability: Solver-grid permeability (mD).
            pressure: Solver-grid buildup ``(T, *sim_grid)``.
            saturation: Solver-grid saturation ``(T, *sim_grid)``.
            window: Level-1 window of ``well`` in level-0 cells.
            well: The well.
            well_index: Position of ``well`` in ``config.wells``; seeds its ln k detail.
            max_level: Deepest level to solve.

        Returns:
            Static channels, buildup and saturation of every refined level, unrestricted.
        """
        refined = RefinedWell()
        if max_level < 2:
            return refined
        r1 = geometry.refinement[0]
        scaled = scale_box(window, r1)
        ln_k = np.log(crop_box(permeability, scaled))
        p = crop_box(pressure, scaled)
        s = crop_box(saturation, scaled)
        spacing: Spacing = tuple(config.spacing)
        origin: Spacing = tuple(lo * d for lo, d in zip(scaled.lo, spacing))
        columns = well_columns(geometry, window, well.location, max_level)
        z_scale = r1[2]
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, well_index]))
        detail_std = config.detail_std * config.permeability_std

        for level in range(2, max_level + 1):
            ratio = geometry.refinement[level - 1]
            box = geometry.child_box(level)
            fine_box = scale_box(box, ratio)
            grid = geometry.local_grid(level)
            parent_cell = float(np.prod(spacing))
            origin = tuple(o + lo * d for o, lo, d in zip(origin, box.lo, spacing))
            spacing = tuple(d / r for d, r in zip(spacing, ratio))
            z_scale *= ratio[2]

            ln_k = crop_box(prolong_linear(ln_k, ratio), fine_box) + ln_permeability_detail(rng, grid, ratio, detail_std)
            k = np.exp(ln_k)
            cx, cy = columns[level - 1]
            layers = list(range(well.perforation[0] * z_scale, well.perforation[1] * z_scale))
            inside = 0 <= cx < grid[0] and 0 <= cy < grid[1]

            # one fine cell of the prolonged parent around the box, edge-padded at the parent border
            ring = np.pad(prolong_linear(p, ratio), ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
            boundary = ring[:, fine_box.lo[0]:fine_box.hi[0] + 2, fine_box.lo[1]:fine_box.hi[1] + 2,
                            fine_box.lo[2]:fine_box.hi[2]]
            p = reservoir_solver.solve_local(config, k, spacing, boundary,
                                             (well, cx, cy, layers) if inside else None)

            volumes = crop_box(s, box).reshape(s.shape[0], -1).sum(axis=1) * config.porosity * parent_cell
            s = reservoir_solver.fill_local(config, k, spacing, volumes, (cx, cy), layers)

            rate = np.zeros(grid)
            if inside:
                rate[cx, cy, layers] = well.mean_rate
            depth = _cell_depths_m(config, grid, spacing, origin)
            refined.static.append(_static_stack(config, ln_k, depth, rate))
            refined.pressure.append(p)
            refined.saturation.append(s)
            logger.debug(f"Well {well_index} level {level}: column ({cx}, {cy}) {'inside' if inside else 'outside'}, "
                         f"max buildup {p.max():.3f} bar")
        return refined

    def build_sample(self, config: SimConfig, geometry: NestedGeometry, sample_id: int,
                     max_level: int = 4) -> ReservoirSample:
        """Simulate ``config``, solve the refined levels around each well and restrict to every level."""
        grid = geometry.sim_grid
        perm = gen_permeability(config.seed, grid, config.mean_ln_permeability,
                                config.permeability_std, config.correlation_length)
        scale = geometry.refinement[0]
        result = reservoir_solver.simulate(config, perm, well_scale=scale)
        static = static_channels(config, perm, scale)
        windows = [window_box(geometry, w) for w in config.wells]
        refined = [
            self.refine_well(config, geometry, perm, result.pressure_buildup, result.saturation, box, w, i, max_level)
            for i, (w, box) in enumerate(zip(config.wells, windows))
        ]

        static0 = block_average(static, scale)
        static_local = [
            ([crop_box(static, scale_box(box, scale))] + r.static)[:max_level] if max_level else []
            for box, r in zip(windows, refined)
        ]
        p0, p_local = extract_levels(result.pressure_buildup, geometry, windows, max_level,
                                     [r.pressure for r in refined])
        s0, s_local = extract_levels(result.saturation, geometry, windows, max_level,
                                     [r.saturation for r in refined])

        absolute = static[2][None] + result.pressure_buildup
        p_max = absolute.reshape(absolute.shape[0], -1).max(axis=1)
        for st, p in zip(static_local, p_local):
            for level_static, level_p in zip(st, p):
                local = level_static[2][None] + level_p
                p_max = np.maximum(p_max, local.reshape(local.shape[0], -1).max(axis=1))

        wells = [
            LocalTruth(well=w, window=box, static=st, pressure=p, saturation=s)
            for w, box, st, p, s in zip(config.wells, windows, static_local, p_local, s_local)
        ]
        return ReservoirSample(id=sample_id, config=config, geometry=geometry, static0=static0,
                               pressure0=p0, saturation0=s0, p_max=p_max, wells=wells,
                               mean_ln_permeability=float(np.mean(static[0])))

    def generate(self, gen: GenConfig, threads: int = 1) -> list[ReservoirSample]:
        """
        Generate ``gen.n_samples`` samples; sample ``i`` depends only on ``(gen.seed, i)``.
        """
        def one(i: int) -> ReservoirSample:
            config = self.sample_config(gen, i)
            sample = self.build_sample(config, gen.geometry, i, gen.max_level)
            logger.debug(f"Sample {i}: {sample.n_wells} wells, mean ln k {sample.mean_ln_permeability:.3f}")
            return sample

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                samples = list(pool.map(one, range(gen.n_samples)))
        else:
            samples = [one(i) for i in range(gen.n_samples)]
        logger.info(f"✅ Generated {len(samples)} samples")
        return samples


synth_data_service = SynthDataService()


# ---------------------------------------------------------------------------
# persistence and splits
# ---------------------------------------------------------------------------


def _to_record(sample: ReservoirSample) -> tuple[dict, dict[str, np.ndarray]]:
    tensors = {
        "static/0": sample.static0,
        "pressure/0": sample.pressure0,
        "saturation/0": sample.saturation0,
        "p_max": sample.p_max,
    }
    for w, local in enumerate(sample.wells):
        for k in range(len(local.pressure)):
            tensors[f"static/{k + 1}/{w}"] = local.static[k]
            tensors[f"pressure/{k + 1}/{w}"] = local.pressure[k]
            tensors[f"saturation/{k + 1}/{w}"] = local.saturation[k]
    metadata = sample.metadata()
    metadata["config"] = sample.config.model_dump(mode="json")
    metadata["geometry"] = sample.geometry.model_dump(mode="json")
    return metadata, tensors


def _from_record(metadata: dict, tensors: dict[str, np.ndarray]) -> ReservoirSample:
    config = SimConfig.model_validate(metadata["config"])
    geometry = NestedGeometry.model_validate(metadata["geometry"])
    wells = []
    for w, well in enumerate(config.wells):
        local = LocalTruth(well=well, window=window_box(geometry, well))
        for k in range(1, metadata["max_level"] + 1):
            local.static.append(tensors[f"static/{k}/{w}"])
            local.pressure.append(tensors[f"pressure/{k}/{w}"])
            local.saturation.append(tensors[f"saturation/{k}/{w}"])
        wells.append(local)
    return ReservoirSample(id=metadata["id"], config=config, geometry=geometry, static0=tensors["static/0"],
                           pressure0=tensors["pressure/0"], saturation0=tensors["saturation/0"],
                           p_max=tensors["p_max"], wells=wells,
                           mean_ln_permeability=metadata["mean_ln_permeability"])


def write_dataset(path: Union[str, Path], samples: list[ReservoirSample]) -> None:
    write_records(path, [_to_record(s) for s in samples])


def read_dataset(path: Union[str, Path]) -> list[ReservoirSample]:
    samples = [_from_record(m, t) for m, t in read_records(path)]
    logger.info(f"📂 Loaded {len(samples)} samples from {path}")
    return samples


def train_test_split(samples: list[ReservoirSample], test_fraction: float, seed: int
                     ) -> tuple[list[ReservoirSample], list[ReservoirSample]]:
    """Seeded permutation split; the test set takes ``round(n * test_fraction)`` samples."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_test = int(round(len(samples) * test_fraction))
    test = [samples[i] for i in sorted(order[:n_test])]
    train = [samples[i] for i in sorted(order[n_test:])]
    return train, test


def permeability_group(mean_ln_permeability: float, cutoffs: list[float]) -> int:
    """Group 1..len(cutoffs)+1 by the mean ln permeability (upper cutoffs exclusive)."""
    return 1 + sum(1 for c in cutoffs if mean_ln_permeability >= c)
