"""
Nested prediction workflow.

Five pressure networks (levels 0-4) and four saturation networks (levels
1-4) run as a chain. Level 0 predicts pressure on the global grid; around
each well, level 1 reads the level-0 pressure inside its window and every
deeper level reads the whole output of the level above it. Saturation level
1 also reads the windowed level-0 pressure; saturation levels 2-4 read the
saturation of the level above.

Flow per sample with ``n`` wells:
    1. Predict level-0 pressure (1 call)
    2. Per well: pressure levels 1-4 and saturation levels 1-4 (8 calls)
    3. Composite every field so each cell carries its finest prediction

which makes ``4n + 1`` pressure and ``4n`` saturation predictions.

Training uses the true previous-level field as input; fine-tuning replaces
it with the truth plus a residual drawn from the previous level's errors on
the training set.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Union

import numpy as np

from src.errors import ContractError, MissingCheckpointError, ShapeError
from src.models import HORIZON_YEARS, FinetuneConfig, MetricsReport, NestedGeometry, RunConfig, TrainerConfig
from src.services.geometry import CompositeField, WellLevels, extract_window, inject, resample_nearest
from src.services.metrics_service import MetricsAccumulator, level_entry
from src.services.operator_model import FourierDeepONet, build, forward
from src.services.synth_data import FIELD_SCALES, STATIC_SCALES, ReservoirSample
from src.services.tracing_service import tracing_service
from src.services.trainer import LossRecord, OptimState, TrainingExample, train_level
from src.utils.binary_io import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

FIELD_KINDS = ("pressure", "saturation")
N_STATIC = len(STATIC_SCALES)


@dataclass
class LevelRequest:
    """Everything a predictor may use for one level of one sample (and well)."""

    sample_id: int
    level: int
    field_kind: str
    well: Optional[int]
    branch_in: np.ndarray
    times: np.ndarray
    time_index: np.ndarray


class Predictor(Protocol):
    def predict(self, request: LevelRequest) -> np.ndarray: ...


class NetworkPredictor:
    """Operator network plus the output scale of its field; predictions are physical."""

    def __init__(self, model: FourierDeepONet, field_kind: str, level: int, time_batch: Optional[int] = None):
        self.model = model
        self.field_kind = field_kind
        self.level = level
        self.time_batch = time_batch

    def predict(self, request: LevelRequest) -> np.ndarray:
        out = forward(self.model, request.branch_in, request.times, time_batch=self.time_batch)
        return out * FIELD_SCALES[self.field_kind]


def checkpoint_path(directory: Union[str, Path], field_kind: str, level: int, suffix: str = ".fdon",
                    tag: str = "") -> Path:
    return Path(directory) / f"{field_kind}_L{level}{tag}{suffix}"


class NestedModelSet:
    """
    Pressure predictors for levels ``0..D`` and saturation predictors for ``1..D``.

    Raises:
        ContractError: If a level is missing in between, depths differ, or a
            level-0 saturation model is given.
    """

    def __init__(self, pressure: dict[int, Predictor], saturation: dict[int, Predictor]):
        if 0 in saturation:
            raise ContractError("there is no level-0 saturation model")
        depth = len(pressure) - 1
        if sorted(pressure) != list(range(depth + 1)) or sorted(saturation) != list(range(1, depth + 1)):
            raise ContractError(
                f"need pressure levels 0..D and saturation levels 1..D, got {sorted(pressure)} / {sorted(saturation)}"
            )
        self.pressure = dict(pressure)
        self.saturation = dict(saturation)

    @property
    def max_level(self) -> int:
        return len(self.pressure) - 1

    def get(self, field_kind: str, level: int) -> Predictor:
        models = self.pressure if field_kind == "pressure" else self.saturation
        if level not in models:
            raise ContractError(f"no {field_kind} model for level {level}")
        return models[level]

    def replace(self, field_kind: str, level: int, predictor: Predictor) -> "NestedModelSet":
        pressure, saturation = dict(self.pressure), dict(self.saturation)
        (pressure if field_kind == "pressure" else saturation)[level] = predictor
        return NestedModelSet(pressure, saturation)

    def entries(self) -> list[tuple[str, int, Predictor]]:
        return [("pressure", k, m) for k, m in sorted(self.pressure.items())] + \
               [("saturation", k, m) for k, m in sorted(self.saturation.items())]

    def save(self, directory: Union[str, Path], suffix: str = ".fdon", tag: str = "") -> list[Path]:
        """Write one FDON1 checkpoint per network predictor."""
        paths = []
        for field_kind, level, predictor in self.entries():
            if not isinstance(predictor, NetworkPredictor):
                raise ContractError(f"{field_kind} level {level} is not a network and cannot be saved")
            path = checkpoint_path(directory, field_kind, level, suffix, tag)
            save_checkpoint(path, predictor.model)
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory: Union[str, Path], max_level: int, suffix: str = ".fdon", tag: str = "",
             time_batch: Optional[int] = None) -> "NestedModelSet":
        """
        Load every checkpoint of a ``max_level``-deep set.

        Raises:
            MissingCheckpointError: If any checkpoint is absent.
        """
        pressure, saturation = {}, {}
        for level in range(max_level + 1):
            kinds = ("pressure",) if level == 0 else FIELD_KINDS
            for field_kind in kinds:
                path = checkpoint_path(directory, field_kind, level, suffix, tag)
                if not path.exists():
                    raise MissingCheckpointError(f"checkpoint not found: {path}")
                model = NetworkPredictor(load_checkpoint(path), field_kind, level, time_batch)
                (pressure if field_kind == "pressure" else saturation)[level] = model
        return cls(pressure, saturation)


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------


def previous_kind(field_kind: str, level: int) -> str:
    """Field that feeds ``field_kind`` at ``level`` (level 1 always reads pressure)."""
    return "pressure" if level == 1 else field_kind


def normalized_times(sample: ReservoirSample, time_index: Optional[np.ndarray] = None) -> np.ndarray:
    years = sample.times.years() / HORIZON_YEARS
    return years if time_index is None else years[time_index]


def _static_input(sample: ReservoirSample, level: int, well: Optional[int]) -> np.ndarray:
    static = sample.static(level, well)
    if static.shape[0] != N_STATIC:
        raise ContractError(f"sample {sample.id} level {level}: expected {N_STATIC} static channels, got {static.shape[0]}")
    return static / np.asarray(STATIC_SCALES)[:, None, None, None]


def previous_field_input(geometry: NestedGeometry, level: int, prev: np.ndarray, well_spec) -> np.ndarray:
    """
    Previous-level field mapped onto the grid of ``level``.

    Level 1 takes the level-0 window around the well, injected cell by cell;
    deeper levels take the whole parent output.
    """
    grid = geometry.grid(level)
    if level == 1:
        window = extract_window(prev, well_spec, geometry)
        return resample_nearest(inject(window, geometry.refinement[0]), grid)
    return resample_nearest(prev, grid)


def assemble_level_input(sample: ReservoirSample, level: int, field_kind: str, source: str = "truth",
                         well: Optional[int] = None, prev: Optional[np.ndarray] = None,
                         time_index: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Branch input of one level.

    Args:
        sample: Reservoir sample.
        level: 0-4.
        field_kind: "pressure" or "saturation".
        source: "truth" reads the previous-level field from the sample,
            "prediction" uses ``prev``.
        well: Well index (levels >= 1).
        prev: Previous-level field ``(T, *parent_grid)`` for source "prediction".
        time_index: Snapshots to include (all by default).

    Returns:
        ``(4, *grid)`` for level 0, ``(T, 5, *grid)`` for local levels.

    Raises:
        ContractError: If a required channel (well, previous field) is missing.
    """
    if level == 0:
        if field_kind != "pressure":
            raise ContractError("level 0 predicts pressure only")
        return _static_input(sample, 0, None)
    if well is None or not 0 <= well < sample.n_wells:
        raise ContractError(f"level {level} input needs a well index of sample {sample.id}")
    kind = previous_kind(field_kind, level)
    if source == "truth":
        prev = sample.truth(kind, level - 1, well)
        if time_index is not None:
            prev = prev[time_index]
    elif prev is None:
        raise ContractError(f"level {level} {field_kind} input is missing the previous-level field")
    mapped = previous_field_input(sample.geometry, level, prev, sample.config.wells[well]) / FIELD_SCALES[kind]
    static = _static_input(sample, level, well)
    if static.shape[1:] != mapped.shape[1:]:
        raise ShapeError(f"static channels {static.shape} and previous field {mapped.shape} disagree")
    stacked = np.broadcast_to(static, (mapped.shape[0],) + static.shape)
    return np.concatenate([stacked, mapped[:, None]], axis=1)


def _units(sample: ReservoirSample, level: int) -> list[Optional[int]]:
    return [None] if level == 0 else list(range(sample.n_wells))


# ---------------------------------------------------------------------------
# error banks and fine-tuning noise
# ---------------------------------------------------------------------------


@dataclass
class ErrorBank:
    """Residuals (prediction - truth) of one level's model over a training set."""

    level: int
    field_kind: str
    residuals: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.residuals)

    def mean(self) -> np.ndarray:
        return np.mean(np.stack(self.residuals), axis=0)


def build_error_bank(predictor: Predictor, samples: list[ReservoirSample], level: int, field_kind: str) -> ErrorBank:
    """One residual per training sample (per well for local levels), with true inputs."""
    bank = ErrorBank(level=level, field_kind=field_kind)
    for sample in samples:
        time_index = np.arange(sample.times.n_t)
        for well in _units(sample, level):
            request = LevelRequest(
                sample_id=sample.id, level=level, field_kind=field_kind, well=well,
                branch_in=assemble_level_input(sample, level, field_kind, "truth", well),
                times=normalized_times(sample), time_index=time_index,
            )
            bank.residuals.append(predictor.predict(request) - sample.truth(field_kind, level, well))
    logger.info(f"🏦 Error bank {field_kind} level {level}: {len(bank)} residuals")
    return bank


def noised_input(truth_prev: np.ndarray, bank: ErrorBank, rng: np.random.Generator) -> np.ndarray:
    """
    ``truth_prev`` plus one residual drawn uniformly (with replacement) from ``bank``.

    Raises:
        ContractError: If the bank is empty.
        ShapeError: If the residual does not match ``truth_prev``.
    """
    if len(bank) == 0:
        raise ContractError("error bank is empty")
    residual = bank.residuals[int(rng.integers(len(bank)))]
    if residual.shape != truth_prev.shape:
        raise ShapeError(f"residual {residual.shape} does not match field {truth_prev.shape}")
    return truth_prev + residual


def level_examples(samples: list[ReservoirSample], level: int, field_kind: str,
                   bank: Optional[ErrorBank] = None, noise_rng: Optional[np.random.Generator] = None
                   ) -> list[TrainingExample]:
    """
    Training pairs for one level: true previous-level inputs, or noised ones when ``bank`` is given.
    """
    examples = []
    for sample in samples:
        for well in _units(sample, level):
            if bank is None or level == 0:
                branch = assemble_level_input(sample, level, field_kind, "truth", well)
            else:
                truth_prev = sample.truth(previous_kind(field_kind, level), level - 1, well)
                prev = noised_input(truth_prev, bank, noise_rng or np.random.default_rng(0))
                branch = assemble_level_input(sample, level, field_kind, "prediction", well, prev=prev)
            target = sample.truth(field_kind, level, well) / FIELD_SCALES[field_kind]
            examples.append(TrainingExample(branch_in=branch, times=normalized_times(sample), target=target))
    return examples


# ---------------------------------------------------------------------------
# inference and compositing
# ---------------------------------------------------------------------------


@dataclass
class LevelPredictions:
    """Raw per-level outputs of one sample (local lists indexed by well, then level - 1)."""

    pressure0: np.ndarray
    pressure: list[list[np.ndarray]]
    saturation: list[list[np.ndarray]]


def _predict(models: NestedModelSet, sample: ReservoirSample, level: int, field_kind: str,
             well: Optional[int], branch_in: np.ndarray, time_index: np.ndarray) -> np.ndarray:
    request = LevelRequest(sample_id=sample.id, level=level, field_kind=field_kind, well=well,
                           branch_in=branch_in, times=normalized_times(sample, time_index), time_index=time_index)
    with tracing_service.span(f"predict.{field_kind}"):
        return models.get(field_kind, level).predict(request)


def predict_levels(models: NestedModelSet, sample: ReservoirSample, mode: str = "sequential",
                   time_index: Optional[np.ndarray] = None, threads: int = 1) -> LevelPredictions:
    """
    Run every level of ``models`` on ``sample``.

    In "sequential" mode each level reads the previous level's prediction;
    in "separate" mode it reads the previous level's truth.

    Raises:
        ContractError: On an unknown mode, or if the sample stores fewer
            levels than the models need.
    """
    if mode not in ("sequential", "separate"):
        raise ContractError(f"unknown evaluation mode '{mode}'")
    if sample.n_wells == 0:
        raise ContractError(f"sample {sample.id} has no wells")
    depth = models.max_level
    if depth > sample.max_level:
        raise ContractError(f"sample {sample.id} stores {sample.max_level} levels, models need {depth}")
    time_index = np.arange(sample.times.n_t) if time_index is None else np.asarray(time_index)
    source = "truth" if mode == "separate" else "prediction"

    p0 = _predict(models, sample, 0, "pressure", None, assemble_level_input(sample, 0, "pressure"), time_index)

    def chain(well: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        pressure: list[np.ndarray] = []
        saturation: list[np.ndarray] = []
        for level in range(1, depth + 1):
            for field_kind, outputs in (("pressure", pressure), ("saturation", saturation)):
                prev = p0 if level == 1 else (pressure if field_kind == "pressure" else saturation)[-1]
                branch = assemble_level_input(sample, level, field_kind, source, well,
                                              prev=prev if source == "prediction" else None, time_index=time_index)
                outputs.append(_predict(models, sample, level, field_kind, well, branch, time_index))
        return pressure, saturation

    if threads > 1 and sample.n_wells > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chains = list(pool.map(chain, range(sample.n_wells)))
    else:
        chains = [chain(w) for w in range(sample.n_wells)]
    return LevelPredictions(pressure0=p0, pressure=[c[0] for c in chains], saturation=[c[1] for c in chains])


def composite_fields(geometry: NestedGeometry, level0: np.ndarray, windows: list, per_well: list[list[np.ndarray]],
                     locations: Optional[list] = None) -> CompositeField:
    """
    Combine per-level outputs so every cell carries the finest level covering it.

    ``locations`` are the wells' level-0 cells, kept for plotting.

    Raises:
        ContractError: If two wells' windows overlap.
    """
    raw = CompositeField(geometry=geometry, level0=level0,
                         wells=[WellLevels(window=w, levels=list(levels), location=loc)
                               for w, levels, loc in zip(windows, per_well, locations or [None] * len(windows))])
    return raw.composite()


@dataclass
class InferenceResult:
    pressure: CompositeField
    saturation: CompositeField
    raw: LevelPredictions


def sequential_infer(models: NestedModelSet, sample: ReservoirSample, time_index: Optional[np.ndarray] = None,
                     threads: int = 1) -> InferenceResult:
    """Nested prediction of one sample and its composited pressure and saturation fields."""
    raw = predict_levels(models, sample, "sequential", time_index, threads)
    windows = [w.window for w in sample.wells]
    locations = [w.well.location for w in sample.wells]
    pressure = composite_fields(sample.geometry, raw.pressure0, windows, raw.pressure, locations)
    saturation = composite_fields(sample.geometry, np.zeros_like(raw.pressure0), windows, raw.saturation, locations)
    return InferenceResult(pressure=pressure, saturation=saturation, raw=raw)


def truth_composite(sample: ReservoirSample, field_kind: str, depth: int,
                    time_index: Optional[np.ndarray] = None) -> CompositeField:
    idx = np.arange(sample.times.n_t) if time_index is None else time_index
    level0 = sample.truth(field_kind, 0)[idx]
    per_well = [[arr[idx] for arr in (w.pressure if field_kind == "pressure" else w.saturation)[:depth]]
                for w in sample.wells]
    return composite_fields(sample.geometry, level0, [w.window for w in sample.wells], per_well,
                            [w.well.location for w in sample.wells])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_mode(models: NestedModelSet, samples: list[ReservoirSample], mode: str = "sequential",
                  time_index: Optional[np.ndarray] = None, threads: int = 1) -> MetricsReport:
    """
    Per-level and total metrics over ``samples`` in "sequential" or "separate" mode.

    Per-sample values are averaged; quartiles are reported alongside.
    """
    accumulator = MetricsAccumulator(mode=mode)
    depth = models.max_level
    for sample in samples:
        idx = np.arange(sample.times.n_t) if time_index is None else np.asarray(time_index)
        p_max = sample.p_max[idx]
        raw = predict_levels(models, sample, mode, idx, threads)
        accumulator.add(sample.id, level_entry("pressure", "0", [raw.pressure0], [sample.pressure0[idx]], p_max))
        for level in range(1, depth + 1):
            for field_kind, preds in (("pressure", raw.pressure), ("saturation", raw.saturation)):
                truths = [sample.truth(field_kind, level, w)[idx] for w in range(sample.n_wells)]
                accumulator.add(sample.id, level_entry(field_kind, str(level), [p[level - 1] for p in preds],
                                                       truths, p_max))
        windows = [w.window for w in sample.wells]
        for field_kind, level0, per_well in (
            ("pressure", raw.pressure0, raw.pressure),
            ("saturation", np.zeros_like(raw.pressure0), raw.saturation),
        ):
            if field_kind == "saturation" and depth == 0:
                continue
            pred = composite_fields(sample.geometry, level0, windows, per_well).flatten()
            truth = truth_composite(sample, field_kind, depth, idx).flatten()
            accumulator.add(sample.id, level_entry(field_kind, "total", [pred], [truth], p_max))
    report = accumulator.report()
    logger.info(f"📊 Evaluated {len(samples)} samples in {mode} mode")
    return report


# ---------------------------------------------------------------------------
# training and fine-tuning
# ---------------------------------------------------------------------------


def _model_seed(seed: int, field_kind: str, level: int) -> int:
    return int(np.random.SeedSequence([seed, FIELD_KINDS.index(field_kind), level]).generate_state(1)[0])


def level_arch(config: RunConfig, level: int):
    geometry = config.geometry
    if level == 0:
        return config.models.global_arch.to_arch(geometry.global_grid, N_STATIC)
    return config.models.local_arch.to_arch(geometry.local_grid(level), N_STATIC + 1)


@dataclass
class TrainingRun:
    models: NestedModelSet
    histories: dict[tuple[str, int], list[LossRecord]]


def train_models(samples: list[ReservoirSample], config: RunConfig, max_level: Optional[int] = None,
                 epochs: Optional[int] = None, seed: Optional[int] = None,
                 saturation_samples: Optional[list[ReservoirSample]] = None) -> TrainingRun:
    """
    Build and train every network of a nested set, each level independently on true inputs.

    ``saturation_samples`` replaces ``samples`` for the saturation networks
    (the rate study selects saturation training data per well).
    """
    saturation_samples = samples if saturation_samples is None else saturation_samples
    if not samples or not saturation_samples:
        raise ContractError("training set is empty")
    depth = min(s.max_level for s in samples) if max_level is None else max_level
    epochs = config.trainer.epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    pressure, saturation, histories = {}, {}, {}
    for level in range(depth + 1):
        for field_kind in ("pressure",) if level == 0 else FIELD_KINDS:
            model_seed = _model_seed(seed, field_kind, level)
            model = build(level_arch(config, level), model_seed)
            source = samples if field_kind == "pressure" else saturation_samples
            examples = level_examples(source, level, field_kind)
            label = f"{field_kind} L{level}"
            logger.info(f"🚀 Training {label} on {len(examples)} examples for {epochs} epochs")
            _, history = train_level(model, examples, epochs, config.trainer,
                                     rng=np.random.default_rng(model_seed), label=label)
            histories[(field_kind, level)] = history
            predictor = NetworkPredictor(model, field_kind, level, config.trainer.time_batch)
            (pressure if field_kind == "pressure" else saturation)[level] = predictor
    return TrainingRun(models=NestedModelSet(pressure, saturation), histories=histories)


def finetune(models: NestedModelSet, targets: list[tuple[str, int]], samples: list[ReservoirSample],
             epochs: int, trainer: Optional[TrainerConfig] = None, seed: int = 0
             ) -> tuple[NestedModelSet, dict[tuple[str, int], list[LossRecord]]]:
    """
    Continue training the listed networks with noised previous-level inputs.

    Error banks come from the untuned models of the level above. Noise and
    training shuffles use separate generators, so all-zero banks reproduce
    ordinary continued training exactly. Only listed models change; they
    are trained on copies.

    Raises:
        ContractError: If a level-0 target is listed or a target is not a network.
    """
    trainer = trainer or TrainerConfig()
    for field_kind, level in targets:
        if level == 0:
            raise ContractError("level 0 has no previous-level input and cannot be fine-tuned")
    tuned = models
    histories = {}
    for field_kind, level in targets:
        base = models.get(field_kind, level)
        if not isinstance(base, NetworkPredictor):
            raise ContractError(f"{field_kind} level {level} is not a network")
        kind = previous_kind(field_kind, level)
        bank = build_error_bank(models.get(kind, level - 1), samples, level - 1, kind)
        model = base.model.copy()
        model_seed = _model_seed(seed, field_kind, level)
        train_rng = np.random.default_rng(model_seed)
        noise_rng = np.random.default_rng([model_seed, 1])
        state = OptimState.from_config(trainer)
        history: list[LossRecord] = []
        label = f"{field_kind} L{level} (fine-tune)"
        for epoch in range(epochs):
            examples = level_examples(samples, level, field_kind, bank=bank, noise_rng=noise_rng)
            _, records = train_level(model, examples, 1, trainer, rng=train_rng, state=state,
                                     label=label, first_epoch=epoch)
            history.extend(records)
        histories[(field_kind, level)] = history
        tuned = tuned.replace(field_kind, level, NetworkPredictor(model, field_kind, level, base.time_batch))
    return tuned, histories


def default_finetune_targets() -> list[tuple[str, int]]:
    return list(FinetuneConfig().targets)
