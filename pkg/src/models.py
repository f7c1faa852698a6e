"""
Pydantic models for configuration documents and reports.

Every document a user writes (run configuration, generation settings,
architecture overrides) is validated here with ``extra="forbid"`` so unknown
keys are rejected at startup.
"""

from __future__ import annotations

import math
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DAYS_PER_YEAR = 365.25
HORIZON_YEARS = 30.0

Triple = tuple[int, int, int]


class StrictModel(BaseModel):
    """Base for configuration documents: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# time
# ---------------------------------------------------------------------------


class TimeGrid(StrictModel):
    """Ordered snapshot times in years."""

    snapshots: list[float] = Field(..., description="Strictly increasing positive times (years)")

    @field_validator("snapshots")
    @classmethod
    def _increasing(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("time grid needs at least one snapshot")
        if v[0] <= 0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("snapshots must be positive and strictly increasing")
        return v

    @property
    def n_t(self) -> int:
        return len(self.snapshots)

    def years(self) -> np.ndarray:
        return np.asarray(self.snapshots, dtype=np.float64)

    def subset(self, indices) -> "TimeGrid":
        return TimeGrid(snapshots=[self.snapshots[i] for i in indices])

    @classmethod
    def default(cls) -> "TimeGrid":
        """The 24 snapshots from 10 days to 30 years."""
        days = [10, 20, 30, 50, 80, 110, 150, 210, 280]
        years = [1.0, 1.3, 1.7, 2.2, 2.8, 3.6, 4.6, 5.9, 7.5, 9.4, 11.9, 15.0, 19.0, 23.9, 30.0]
        return cls(snapshots=[d / DAYS_PER_YEAR for d in days] + years)


# ---------------------------------------------------------------------------
# operator model architecture
# ---------------------------------------------------------------------------


class ArchSpec(StrictModel):
    """Architecture of one level's Fourier-DeepONet."""

    grid: Triple = Field(..., description="Output grid (nx, ny, nz) in cells")
    in_channels: int = Field(..., gt=0, description="Number of branch input fields")
    width: int = Field(32, gt=0, description="Lifted channel count, equals trunk output width")
    padding: int = Field(8, ge=0, description="Zero padding per side of every spatial axis")
    n_fourier_layers: int = Field(4, gt=0)
    modes: Triple = Field((12, 12, 4), description="Retained low-frequency bins per axis")
    projection_hidden: int = Field(128, gt=0, description="Hidden width of the projection Q")
    trunk_in: int = Field(1, gt=0, description="Trunk input dimension (time)")
    time_scale: float = Field(HORIZON_YEARS, gt=0, description="Trunk input is t / time_scale")

    @model_validator(mode="after")
    def _check(self) -> "ArchSpec":
        if any(n <= 0 for n in self.grid):
            raise ValueError(f"grid extents must be positive, got {self.grid}")
        for m, n in zip(self.modes, self.padded_grid):
            if m < 1 or m > n:
                raise ValueError(f"modes {self.modes} do not fit padded grid {self.padded_grid}")
        return self

    @property
    def padded_grid(self) -> Triple:
        return tuple(n + 2 * self.padding for n in self.grid)  # type: ignore[return-value]

    @classmethod
    def global_level(cls, in_channels: int = 4, modes: Triple = (12, 12, 4)) -> "ArchSpec":
        return cls(grid=(100, 100, 5), in_channels=in_channels, width=32, projection_hidden=128, modes=modes)

    @classmethod
    def lgr1(cls, in_channels: int = 5, modes: Triple = (12, 12, 8)) -> "ArchSpec":
        return cls(grid=(40, 40, 25), in_channels=in_channels, width=36, projection_hidden=144, modes=modes)

    @classmethod
    def lgr2_4(cls, in_channels: int = 5, modes: Triple = (12, 12, 8)) -> "ArchSpec":
        return cls(grid=(40, 40, 50), in_channels=in_channels, width=36, projection_hidden=144, modes=modes)

    @classmethod
    def toy(cls, grid: Triple = (8, 8, 5), in_channels: int = 5) -> "ArchSpec":
        """Small model for the toy geometry and tests."""
        return ArchOverrides().to_arch(grid, in_channels)


class ArchOverrides(StrictModel):
    """Per-level-kind architecture knobs of a run configuration."""

    width: int = Field(8, gt=0)
    padding: int = Field(2, ge=0)
    n_fourier_layers: int = Field(4, gt=0)
    modes: Triple = (4, 4, 2)
    projection_hidden: int = Field(16, gt=0)

    def to_arch(self, grid: Triple, in_channels: int) -> ArchSpec:
        return ArchSpec(grid=grid, in_channels=in_channels, **self.model_dump())


class ModelConfig(StrictModel):
    global_arch: ArchOverrides = Field(default_factory=ArchOverrides)
    local_arch: ArchOverrides = Field(default_factory=ArchOverrides)


# ---------------------------------------------------------------------------
# nested geometry
# ---------------------------------------------------------------------------


class Box(StrictModel):
    """Half-open index box ``[lo, hi)`` on a parent grid."""

    lo: Triple
    hi: Triple

    @property
    def extent(self) -> Triple:
        return tuple(h - l for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]

    def intersects(self, other: "Box") -> bool:
        return all(l1 < h2 and l2 < h1 for l1, h1, l2, h2 in zip(self.lo, self.hi, other.lo, other.hi))


class LevelConfig(StrictModel):
    """One refinement level of the nested framework."""

    level: int = Field(..., ge=0, le=4)
    grid: Triple
    parent: Optional[int] = None
    refinement: Triple = (1, 1, 1)
    window: Optional[tuple[int, int]] = Field(None, description="Level-1 window in level-0 cells")
    overlap_box: Optional[Box] = Field(None, description="Box occupied inside the parent (levels 2-4)")

    @model_validator(mode="after")
    def _chain(self) -> "LevelConfig":
        if self.level == 0 and self.parent is not None:
            raise ValueError("level 0 has no parent")
        if self.level > 0 and self.parent != self.level - 1:
            raise ValueError(f"level {self.level} must have parent {self.level - 1}")
        return self


class NestedGeometry(StrictModel):
    """
    Toy nested geometry: a global grid plus four local levels per well.

    Level 1 covers a ``window`` of level-0 cells around the well; levels 2-4
    each cover a centered ``footprint`` of their parent's cells. Every level
    refines its parent by an integer ratio, so boxes align with parent cells.
    """

    global_grid: Triple = (20, 20, 5)
    window: tuple[int, int] = (4, 4)
    footprint: tuple[int, int] = (4, 4)
    refinement: list[Triple] = Field(default_factory=lambda: [(2, 2, 1)] * 4)

    @model_validator(mode="after")
    def _check(self) -> "NestedGeometry":
        if len(self.refinement) != 4:
            raise ValueError("refinement needs one ratio per local level (4)")
        if any(r < 1 for ratio in self.refinement for r in ratio):
            raise ValueError("refinement ratios must be >= 1")
        if self.window[0] > self.global_grid[0] or self.window[1] > self.global_grid[1]:
            raise ValueError(f"window {self.window} exceeds global grid {self.global_grid}")
        grid = self.local_grid(1)
        for level in (2, 3, 4):
            if self.footprint[0] > grid[0] or self.footprint[1] > grid[1]:
                raise ValueError(f"footprint {self.footprint} exceeds level-{level - 1} grid {grid}")
            grid = self.local_grid(level)
        return self

    @property
    def sim_grid(self) -> Triple:
        """Resolution of the toy solver: level-0 grid refined to level-1 resolution."""
        return tuple(n * r for n, r in zip(self.global_grid, self.refinement[0]))  # type: ignore[return-value]

    def local_grid(self, level: int) -> Triple:
        r = self.refinement[level - 1]
        if level == 1:
            footprint = (self.window[0], self.window[1], self.global_grid[2])
        else:
            footprint = (self.footprint[0], self.footprint[1], self.local_grid(level - 1)[2])
        return tuple(f * k for f, k in zip(footprint, r))  # type: ignore[return-value]

    def grid(self, level: int) -> Triple:
        return self.global_grid if level == 0 else self.local_grid(level)

    def child_box(self, level: int) -> Box:
        """Box that level ``level`` (2-4) occupies inside its parent grid."""
        parent = self.local_grid(level - 1)
        lo = ((parent[0] - self.footprint[0]) // 2, (parent[1] - self.footprint[1]) // 2, 0)
        return Box(lo=lo, hi=(lo[0] + self.footprint[0], lo[1] + self.footprint[1], parent[2]))

    def level_configs(self) -> list[LevelConfig]:
        configs = [LevelConfig(level=0, grid=self.global_grid)]
        configs.append(LevelConfig(level=1, grid=self.local_grid(1), parent=0,
                                   refinement=self.refinement[0], window=self.window))
        for level in (2, 3, 4):
            configs.append(LevelConfig(level=level, grid=self.local_grid(level), parent=level - 1,
                                       refinement=self.refinement[level - 1],
                                       overlap_box=self.child_box(level)))
        return configs


# ---------------------------------------------------------------------------
# reservoir description
# ---------------------------------------------------------------------------


class WellSpec(StrictModel):
    """An injection well on the level-0 grid."""

    location: tuple[int, int] = Field(..., description="(x, y) in level-0 cell indices")
    perforation: tuple[int, int] = Field((0, 5), description="Half-open z-layer interval on the level-0 grid")
    rate_schedule: list[float] = Field(..., description="MT/yr per equal-length period over the horizon")

    @field_validator("rate_schedule")
    @classmethod
    def _rates(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("rate_schedule needs at least one period")
        if any(r < 0 or not math.isfinite(r) for r in v):
            raise ValueError("injection rates must be finite and >= 0")
        return v

    @property
    def max_rate(self) -> float:
        return max(self.rate_schedule)

    @property
    def mean_rate(self) -> float:
        return float(np.mean(self.rate_schedule))


class SimConfig(StrictModel):
    """Physical description of one synthetic reservoir."""

    porosity: float = Field(0.2, gt=0.0, lt=1.0, description="Porosity (fraction)")
    mean_ln_permeability: float = Field(1.1, description="Mean of ln k (ln mD)")
    permeability_std: float = Field(0.4, ge=0.0, description="Std of ln k")
    correlation_length: float = Field(3.0, gt=0.0, description="Correlation length in sim cells")
    viscosity: float = Field(1.0, gt=0.0, description="Relative brine viscosity")
    compressibility: float = Field(1.0, gt=0.0, description="Relative total compressibility c_t")
    spacing: tuple[float, float, float] = Field((1.0, 1.0, 0.5), description="Sim-grid cell size (km)")
    kv_kh: float = Field(0.1, gt=0.0, le=1.0, description="Vertical to horizontal permeability ratio")
    dip_deg: float = Field(0.0, ge=0.0, lt=45.0, description="Formation dip along x (degrees)")
    depth_m: float = Field(2000.0, gt=0.0, description="Depth of the reservoir top (m)")
    temperature_c: float = Field(70.0, description="Temperature at the reservoir top (deg C)")
    geothermal_gradient: float = Field(30.0, ge=0.0, description="deg C per km of depth")
    diffusivity_scale: float = Field(0.2, gt=0.0, description="km^2/yr of hydraulic diffusivity per mD")
    pressure_per_volume: float = Field(1000.0, gt=0.0, description="bar of buildup per km^3 injected per unit of storage (phi c_t V)")
    volume_per_mt: float = Field(0.1, gt=0.0, description="Reservoir km^3 occupied per MT of CO2")
    max_saturation: float = Field(0.8, gt=0.0, le=1.0, description="Saturation of a fully swept cell")
    buoyancy: float = Field(2.0, ge=0.0, description="Weight of height in the plume invasion order")
    max_substeps: int = Field(200_000, gt=0, description="Stability budget for the explicit solver")
    detail_std: float = Field(0.5, ge=0.0, description="Std of the ln k detail added per refined level, relative to permeability_std")
    implicit_steps: int = Field(4, gt=0, description="Backward-Euler steps per snapshot interval of a refined-level solve")
    seed: int = Field(0, ge=0)
    wells: list[WellSpec] = Field(default_factory=list)
    times: TimeGrid = Field(default_factory=TimeGrid.default)


class GenConfig(StrictModel):
    """Ranges the synthetic dataset generator samples from."""

    n_samples: int = Field(10, ge=0)
    seed: int = Field(0, ge=0)
    geometry: NestedGeometry = Field(default_factory=NestedGeometry)
    max_level: int = Field(4, ge=0, le=4, description="Deepest level whose tensors are stored")
    wells: tuple[int, int] = Field((1, 4), description="Inclusive range of wells per reservoir")
    rate: tuple[float, float] = Field((0.5, 2.0), description="Injection rate range (MT/yr)")
    mean_ln_permeability: tuple[float, float] = (0.9, 1.5)
    permeability_std: tuple[float, float] = (0.2, 0.6)
    correlation_length: tuple[float, float] = (2.0, 6.0)
    porosity: tuple[float, float] = (0.1, 0.3)
    depth_m: tuple[float, float] = (800.0, 4500.0)
    surface_temperature_c: float = 15.0
    physics: SimConfig = Field(default_factory=SimConfig, description="Template for fixed physical constants")

    @model_validator(mode="after")
    def _ranges(self) -> "GenConfig":
        for name in ("wells", "rate", "mean_ln_permeability", "permeability_std",
                     "correlation_length", "porosity", "depth_m"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if not (1 <= self.wells[0] and self.wells[1] <= 4):
            raise ValueError("wells must lie within 1..4")
        if self.rate[0] < 0:
            raise ValueError("rate: injection rates must be >= 0")
        if not (0.0 < self.porosity[0] and self.porosity[1] < 1.0):
            raise ValueError("porosity must lie in (0, 1)")
        gx, gy, _ = self.geometry.global_grid
        if gx // 2 < self.geometry.window[0] or gy // 2 < self.geometry.window[1]:
            raise ValueError("the level-1 window must fit inside one quadrant of the global grid")
        return self


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Schedule(StrictModel):
    """Step decay of the learning rate."""

    base_lr: float = Field(0.001, ge=0.0)
    decay: float = Field(0.9, gt=0.0, le=1.0)
    period: int = Field(2, gt=0, description="Epochs between decays")


class TrainerConfig(StrictModel):
    epochs: int = Field(10, ge=0)
    time_batch: int = Field(6, gt=0)
    branch_batch: int = Field(1, gt=0)
    schedule: Schedule = Field(default_factory=Schedule)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class FinetuneConfig(StrictModel):
    epochs: int = Field(2, ge=0)
    targets: list[tuple[Literal["pressure", "saturation"], int]] = Field(
        default_factory=lambda: [("pressure", 1), ("pressure", 4), ("saturation", 1), ("saturation", 2)]
    )


class StudyConfig(StrictModel):
    permeability_cutoffs: list[float] = Field(default_factory=lambda: [1.02, 1.1, 1.25, 1.377])
    rate_threshold: float = Field(1.6, gt=0.0, description="MT/yr")
    train_snapshots: int = Field(21, gt=0, description="Leading snapshots used by the time study")
    epochs: int = Field(5, ge=0)
    max_level: int = Field(1, ge=0, le=4, description="Deepest level trained per split")


class BenchConfig(StrictModel):
    time_batches: list[int] = Field(default_factory=lambda: [1, 2, 4, 6, 12, 24])
    epochs: int = Field(1, gt=0, description="Timed epochs per time batch")
    n_samples: int = Field(2, gt=0, description="Training samples per timed epoch")
    level: int = Field(1, ge=0, le=4, description="Level whose pressure network is benchmarked")


class RunConfig(StrictModel):
    """A complete experiment description (JSON)."""

    dataset: str = Field("runs/dataset.ngcs", description="NGCS1 dataset path")
    output_dir: str = Field("runs", description="Directory for checkpoints and tables")
    checkpoint_dir: Optional[str] = Field(None, description="Defaults to <output_dir>/checkpoints")
    seed: int = Field(0, ge=0)
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    generation: GenConfig = Field(default_factory=GenConfig)
    models: ModelConfig = Field(default_factory=ModelConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    @property
    def geometry(self) -> NestedGeometry:
        return self.generation.geometry


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


class MetricEntry(BaseModel):
    """One row of a metrics table."""

    field: Literal["pressure", "saturation"]
    level: str = Field(..., description="'0'..'4' for a level, 'total' for the composite domain")
    metric: str = Field(..., description="delta_p or delta_s")
    value: Optional[float] = Field(None, description="None when the metric is undefined")
    n_cells: int = Field(..., ge=0)
    plume_cells: Optional[int] = Field(None, description="Sum of the plume indicator (delta_s only)")
    n_samples: int = Field(0, ge=0, description="Samples with a defined value")
    median: Optional[float] = None
    q1: Optional[float] = None
    q3: Optional[float] = None

    @property
    def undefined(self) -> bool:
        return self.value is None


class MetricsReport(BaseModel):
    """Per-level and total delta values, optionally tagged by evaluation mode."""

    mode: str = "sequential"
    entries: list[MetricEntry] = Field(default_factory=list)
    n_samples: int = 0

    def get(self, field: str, level: str) -> Optional[MetricEntry]:
        for e in self.entries:
            if e.field == field and e.level == level:
                return e
        return None

    def value(self, field: str, level: str) -> Optional[float]:
        entry = self.get(field, level)
        return None if entry is None else entry.value


class StudyRow(BaseModel):
    """One delta value of an extrapolation study."""

    study: str
    model: Literal["baseline", "restricted"]
    regime: Literal["interpolation", "extrapolation"]
    field: Literal["pressure", "saturation"]
    level: str
    snapshot: Optional[int] = Field(None, description="Snapshot index for per-time rows")
    value: Optional[float] = None
    median: Optional[float] = None
    q1: Optional[float] = None
    q3: Optional[float] = None
    n_samples: int = 0


class BenchRow(BaseModel):
    """Activation memory and wall time of one time batch size."""

    time_batch: int
    peak_activation_elements: int
    seconds_per_epoch: float


class FlopEstimate(BaseModel):
    """Forward FLOPs of one Fourier layer with a 3D vs a 4D transform at matched shape."""

    grid: Triple
    n_times: int
    width: int
    fft3d_flops: float
    fft4d_flops: float
