"""
Extrapolation studies and the time-batching benchmark.

Each study partitions the dataset by one rule, trains a restricted nested
set on the in-range part and a baseline on the full training split, and
evaluates both on held-out in-range samples (interpolation) and out-of-range
samples (extrapolation):

    wells         1-3 wells vs 4 wells (pressure level 0 only)
    permeability  groups 1-4 vs group 5 of the mean ln permeability
    rate          pressure by reservoir max rate, saturation by per-well rate
    time          snapshots 1-21 vs the remaining ones, reported per snapshot

The benchmark sweeps the time batch size and records the activation element
count of one step together with wall time per epoch.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from src.errors import ContractError, EmptySplitError
from src.models import BenchRow, FlopEstimate, MetricsReport, RunConfig, StudyRow, TrainerConfig
from src.services.operator_model import build
from src.services.synth_data import ReservoirSample, permeability_group, train_test_split
from src.services.tensor_core import fft_flops
from src.services.tracing_service import tracing_service
from src.services.trainer import OptimState, train_level, training_step
from src.workflows.nested_pipeline import (
    NestedModelSet,
    evaluate_mode,
    level_arch,
    level_examples,
    train_models,
)

logger = logging.getLogger(__name__)

STUDY_KINDS = ("wells", "permeability", "rate", "time")


@dataclass
class StudySplit:
    """Samples per role; ``*_times`` restrict snapshots (time study only)."""

    kind: str
    train: list[ReservoirSample]
    baseline_train: list[ReservoirSample]
    interpolation: list[ReservoirSample]
    extrapolation: list[ReservoirSample]
    interpolation_times: Optional[np.ndarray] = None
    extrapolation_times: Optional[np.ndarray] = None
    fields: tuple[str, ...] = ("pressure", "saturation")
    saturation_train: Optional[list[ReservoirSample]] = None
    saturation_interpolation: Optional[list[ReservoirSample]] = None
    saturation_extrapolation: Optional[list[ReservoirSample]] = None

    def require_nonempty(self) -> None:
        for name in ("train", "interpolation", "extrapolation"):
            if not getattr(self, name):
                raise EmptySplitError(f"{self.kind}/{name}")
        for name in ("saturation_train", "saturation_interpolation", "saturation_extrapolation"):
            value = getattr(self, name)
            if value is not None and not value:
                raise EmptySplitError(f"{self.kind}/{name}")


def select_wells(sample: ReservoirSample, wells: list[int]) -> ReservoirSample:
    """
    Copy of ``sample`` exposing only the local levels of ``wells``.

    Level-0 tensors keep every well; only the local chains change.
    """
    config = sample.config.model_copy(update={"wells": [sample.config.wells[w] for w in wells]})
    return dataclasses.replace(sample, config=config, wells=[sample.wells[w] for w in wells])


def _partition(samples: list[ReservoirSample], inside: Callable[[ReservoirSample], bool], fraction: float,
               seed: int) -> tuple[list, list, list, list]:
    """(restricted train, interpolation, extrapolation, baseline train) from one seeded split."""
    train_all, test_all = train_test_split(samples, fraction, seed)
    train = [s for s in train_all if inside(s)]
    interpolation = [s for s in test_all if inside(s)]
    extrapolation = [s for s in test_all if not inside(s)]
    return train, interpolation, extrapolation, train_all


def _well_units(samples: list[ReservoirSample], inside: Callable[[float], bool]) -> list[ReservoirSample]:
    units = []
    for sample in samples:
        keep = [w for w, spec in enumerate(sample.config.wells) if inside(spec.max_rate)]
        if keep:
            units.append(select_wells(sample, keep))
    return units


def make_split(kind: str, samples: list[ReservoirSample], config: RunConfig) -> StudySplit:
    """
    Partition ``samples`` for one study.

    Raises:
        ContractError: On an unknown study kind.
        EmptySplitError: If any role ends up without samples.
    """
    study = config.study
    fraction = config.test_fraction
    seed = config.seed
    if kind == "wells":
        train, interp, extrap, baseline = _partition(samples, lambda s: s.n_wells <= 3, fraction, seed)
        split = StudySplit(kind, train, baseline, interp, extrap, fields=("pressure",))
    elif kind == "permeability":
        last = len(study.permeability_cutoffs) + 1

        def inside(s: ReservoirSample) -> bool:
            return permeability_group(s.mean_ln_permeability, study.permeability_cutoffs) < last

        train, interp, extrap, baseline = _partition(samples, inside, fraction, seed)
        split = StudySplit(kind, train, baseline, interp, extrap)
    elif kind == "rate":
        threshold = study.rate_threshold
        train, interp, extrap, baseline = _partition(samples, lambda s: s.max_rate <= threshold, fraction, seed)
        test_all = train_test_split(samples, fraction, seed)[1]
        split = StudySplit(
            kind, train, baseline, interp, extrap,
            saturation_train=_well_units(baseline, lambda r: r <= threshold),
            saturation_interpolation=_well_units(test_all, lambda r: r <= threshold),
            saturation_extrapolation=_well_units(test_all, lambda r: r > threshold),
        )
    elif kind == "time":
        train, test = train_test_split(samples, fraction, seed)
        n_t = min((s.times.n_t for s in samples), default=0)
        n_train = min(study.train_snapshots, n_t)
        split = StudySplit(
            kind, [s.select_times(range(n_train)) for s in train], train, test, test,
            interpolation_times=np.arange(n_train),
            extrapolation_times=np.arange(n_train, n_t),
        )
        if n_train == n_t:
            raise EmptySplitError("time/extrapolation")
    else:
        raise ContractError(f"unknown study '{kind}', expected one of {STUDY_KINDS}")
    split.require_nonempty()
    logger.info(
        f"🧪 {kind} study: {len(split.train)} train, {len(split.interpolation)} interpolation, "
        f"{len(split.extrapolation)} extrapolation samples"
    )
    return split


def _rows(study: str, model: str, regime: str, report: MetricsReport, fields: tuple[str, ...],
          snapshot: Optional[int] = None) -> list[StudyRow]:
    return [
        StudyRow(study=study, model=model, regime=regime, field=e.field, level=e.level, snapshot=snapshot,
                 value=e.value, median=e.median, q1=e.q1, q3=e.q3, n_samples=e.n_samples)
        for e in report.entries if e.field in fields
    ]


def _evaluate(models: NestedModelSet, split: StudySplit, model_name: str, threads: int) -> list[StudyRow]:
    rows: list[StudyRow] = []
    if split.kind == "time":
        for regime, times in (("interpolation", split.interpolation_times),
                              ("extrapolation", split.extrapolation_times)):
            for t in times:
                report = evaluate_mode(models, split.interpolation, "sequential", np.array([t]), threads)
                rows += _rows(split.kind, model_name, regime, report, split.fields, snapshot=int(t))
        return rows
    pressure_fields = ("pressure",) if split.saturation_train is not None else split.fields
    for regime, samples in (("interpolation", split.interpolation), ("extrapolation", split.extrapolation)):
        rows += _rows(split.kind, model_name, regime, evaluate_mode(models, samples, threads=threads),
                      pressure_fields)
    if split.saturation_train is not None:
        for regime, samples in (("interpolation", split.saturation_interpolation),
                                ("extrapolation", split.saturation_extrapolation)):
            rows += _rows(split.kind, model_name, regime, evaluate_mode(models, samples, threads=threads),
                          ("saturation",))
    return rows


def run_study(kind: str, samples: list[ReservoirSample], config: RunConfig, threads: int = 1) -> list[StudyRow]:
    """
    Train restricted and baseline nested sets for one study and tabulate their errors.

    The wells study only trains the level-0 pressure network, since local
    levels do not depend on the number of wells.
    """
    split = make_split(kind, samples, config)
    depth = 0 if kind == "wells" else config.study.max_level
    epochs = config.study.epochs
    restricted = train_models(split.train, config, max_level=depth, epochs=epochs,
                              saturation_samples=split.saturation_train)
    baseline = train_models(split.baseline_train, config, max_level=depth, epochs=epochs)
    rows = _evaluate(restricted.models, split, "restricted", threads)
    rows += _evaluate(baseline.models, split, "baseline", threads)
    logger.info(f"✅ {kind} study finished with {len(rows)} rows")
    return rows


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def flop_estimate(grid: tuple[int, int, int], n_times: int, width: int, modes: tuple[int, int, int]
                  ) -> FlopEstimate:
    """
    Forward FLOPs of one Fourier layer over ``n_times`` snapshots.

    The 3D variant transforms each snapshot separately; the 4D reference
    transforms space and time together and keeps ``min(modes_z, n_times)``
    temporal modes.
    """
    n_space = int(np.prod(grid))
    linear = 2.0 * width * width * n_space * n_times
    kept3 = int(np.prod(modes))
    fft3d = n_times * 2 * width * fft_flops(n_space) + n_times * 8.0 * kept3 * width * width + linear
    kept4 = kept3 * min(modes[2], n_times)
    fft4d = 2 * width * fft_flops(n_space * n_times) + 8.0 * kept4 * width * width + linear
    return FlopEstimate(grid=grid, n_times=n_times, width=width, fft3d_flops=fft3d, fft4d_flops=fft4d)


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)
    flops: Optional[FlopEstimate] = None


def run_bench(samples: list[ReservoirSample], config: RunConfig) -> BenchResult:
    """
    Peak activation elements and seconds per epoch for each configured time batch.

    Batch sizes larger than the time grid are skipped.
    """
    bench = config.bench
    subset = samples[:bench.n_samples]
    if not subset:
        raise EmptySplitError("bench")
    level = min(bench.level, min(s.max_level for s in subset))
    arch = level_arch(config, level)
    examples = level_examples(subset, level, "pressure")
    n_t = examples[0].times.size
    result = BenchResult()
    for batch in bench.time_batches:
        if batch > n_t:
            logger.warning(f"⚠️ Skipping time batch {batch}: only {n_t} snapshots")
            continue
        trainer = TrainerConfig(**{**config.trainer.model_dump(), "time_batch": batch})
        model = build(arch, config.seed)
        _, peak = training_step(model.copy(), [examples[0].select(np.arange(batch))],
                                OptimState.from_config(trainer), 0.0)
        name = f"bench.epoch.{batch}"
        tracing_service.reset(name)
        for epoch in range(bench.epochs):
            with tracing_service.span(name):
                train_level(model, examples, 1, trainer, rng=np.random.default_rng(config.seed),
                            label=f"bench b={batch}", first_epoch=epoch)
        seconds = tracing_service.seconds(name) / bench.epochs
        result.rows.append(BenchRow(time_batch=batch, peak_activation_elements=peak, seconds_per_epoch=seconds))
        logger.info(f"⏱️ time batch {batch}: peak {peak} elements, {seconds:.3f}s/epoch")
    result.flops = flop_estimate(arch.padded_grid, n_t, arch.width, arch.modes)
    return result
