"""
Command-line entry point for the nested Fourier-DeepONet engine.

Subcommands tie the services into reproducible batch experiments and write
CSV tables, checkpoints and PPM images under the output directory.

Commands:
    gen-data   - Generate a synthetic NGCS1 dataset
    train      - Train every level's network on the training split
    finetune   - Fine-tune selected levels with noised previous-level inputs
    infer      - Nested prediction of one sample, written as composite fields
    evaluate   - Per-level and total errors in sequential and separate mode
    study      - Extrapolation study (wells, permeability, rate, time)
    bench      - Activation memory and time per epoch vs time batch size
    plot       - Heatmaps and CSV slices of composite field files

Example:
    ```bash
    python -m src.main gen-data --config configs/toy.json --out runs
    python -m src.main train --config configs/toy.json --epochs 20
    python -m src.main evaluate --config configs/toy.json
    python -m src.main study time --config configs/toy.json
    ```

Exit codes:
    0 success, 1 engine error, 2 invalid configuration, 3 I/O or format
    error, 4 missing checkpoint, 5 metric undefined everywhere, 6 empty split.

See Also:
    src.workflows.nested_pipeline: Training, inference and evaluation
    src.workflows.experiments: Studies and benchmark
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from src.config import settings
from src.errors import ConfigurationError, DatasetIOError, EmptySplitError, EngineError, MetricUndefinedError
from src.models import RunConfig
from src.services.tracing_service import tracing_service

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

logger = logging.getLogger(__name__)

FINETUNE_TAG = "_ft"


def _format_validation(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{loc}: {item['msg']}")
    return "; ".join(parts)


def load_run_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """
    Read and validate a JSON run config, then apply command-line overrides.

    Raises:
        ConfigurationError: If the document is invalid (message names the field).
        DatasetIOError: If the file cannot be read.
    """
    if path is None:
        config = RunConfig(output_dir=settings.output_dir, seed=settings.default_seed)
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise DatasetIOError(f"cannot read config {path}: {e}") from e
        try:
            config = RunConfig.model_validate_json(text)
        except ValidationError as e:
            raise ConfigurationError(f"invalid config {path}: {_format_validation(e)}") from e
    updates: dict = {}
    if seed is not None:
        updates["seed"] = seed
        updates["generation"] = {"seed": seed}
    if out is not None:
        updates["output_dir"] = out
    return _validated(config, updates)


def _merge(base: dict, updates: dict) -> dict:
    merged = dict(base)
    for key, value in updates.items():
        nested = isinstance(value, dict) and isinstance(merged.get(key), dict)
        merged[key] = _merge(merged[key], value) if nested else value
    return merged


def _validated(config: RunConfig, updates: dict) -> RunConfig:
    """
    ``config`` with ``updates`` deep-merged in, validated like the file.

    Raises:
        ConfigurationError: If an override breaks a constraint.
    """
    if not updates:
        return config
    try:
        return RunConfig.model_validate(_merge(config.model_dump(), updates))
    except ValidationError as e:
        raise ConfigurationError(f"invalid override: {_format_validation(e)}") from e


def apply_overrides(args: argparse.Namespace, config: RunConfig) -> RunConfig:
    """
    Fold command-specific flags into ``config`` and check the ones it does not hold.

    Raises:
        ConfigurationError: On a negative epoch count or max level, or fewer than one thread.
    """
    if getattr(args, "threads", 1) < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {args.threads}")
    max_level = getattr(args, "max_level", None)
    if max_level is not None and not 0 <= max_level <= 4:
        raise ConfigurationError(f"--max-level must lie in 0..4, got {max_level}")
    epochs = getattr(args, "epochs", None)
    if epochs is None:
        return config
    section = {"train": "trainer", "finetune": "finetune", "study": "study"}[args.command]
    return _validated(config, {section: {"epochs": epochs}})


def _checkpoint_dir(config: RunConfig) -> Path:
    return Path(config.checkpoint_dir or Path(config.output_dir) / "checkpoints")


def _dataset_path(args: argparse.Namespace, config: RunConfig) -> Path:
    return Path(getattr(args, "dataset", None) or config.dataset)


def _load_split(args: argparse.Namespace, config: RunConfig):
    from src.services.synth_data import read_dataset, train_test_split

    samples = read_dataset(_dataset_path(args, config))
    return train_test_split(samples, config.test_fraction, config.seed)


def _depth(samples, requested: Optional[int]) -> int:
    available = min((s.max_level for s in samples), default=0)
    return available if requested is None else min(requested, available)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Generate the synthetic dataset described by ``config.generation``.

    Example:
        ```bash
        python -m src.main gen-data --config configs/toy.json --seed 7
        # sample 0: wells=2 mean_ln_k=1.214 max_rate=1.73 levels=4
        ```
    """
    from src.services.synth_data import synth_data_service, write_dataset

    samples = synth_data_service.generate(config.generation, threads=args.threads)
    path = _dataset_path(args, config)
    write_dataset(path, samples)
    for sample in samples:
        meta = sample.metadata()
        print(
            f"sample {meta['id']}: wells={meta['n_wells']} mean_ln_k={meta['mean_ln_permeability']:.3f} "
            f"max_rate={meta['max_rate']:.2f} levels={meta['max_level']}"
        )
    print(f"wrote {len(samples)} samples to {path}")
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Train every network on the training split and write checkpoints plus loss CSVs.

    ``--epochs 0`` writes the initialization unchanged.
    """
    from src.utils.reports import write_loss_csv
    from src.workflows.nested_pipeline import train_models

    train, _ = _load_split(args, config)
    run = train_models(train, config, max_level=_depth(train, args.max_level))
    paths = run.models.save(_checkpoint_dir(config), settings.checkpoint_suffix)
    for (field_kind, level), history in run.histories.items():
        write_loss_csv(Path(config.output_dir) / f"loss_{field_kind}_L{level}.csv", history)
    logger.info(f"✅ Trained {len(paths)} networks into {_checkpoint_dir(config)}")
    return 0


def cmd_finetune(args: argparse.Namespace, config: RunConfig) -> int:
    """Fine-tune ``config.finetune.targets`` and save them next to the base checkpoints."""
    from src.utils.reports import write_loss_csv
    from src.workflows.nested_pipeline import NestedModelSet, finetune

    train, _ = _load_split(args, config)
    models = NestedModelSet.load(_checkpoint_dir(config), _depth(train, args.max_level), settings.checkpoint_suffix)
    targets = [(f, k) for f, k in config.finetune.targets if k <= models.max_level]
    tuned, histories = finetune(models, targets, train, config.finetune.epochs, config.trainer, config.seed)
    tuned.save(_checkpoint_dir(config), settings.checkpoint_suffix, tag=FINETUNE_TAG)
    for (field_kind, level), history in histories.items():
        write_loss_csv(Path(config.output_dir) / f"loss_{field_kind}_L{level}{FINETUNE_TAG}.csv", history)
    return 0


def _models_for(args: argparse.Namespace, config: RunConfig, samples, finetuned: bool = False):
    from src.services.oracle_model import OracleModel
    from src.workflows.nested_pipeline import NestedModelSet

    depth = _depth(samples, args.max_level)
    if getattr(args, "oracle", False):
        return NestedModelSet(**OracleModel.for_levels(samples, depth))
    return NestedModelSet.load(_checkpoint_dir(config), depth, settings.checkpoint_suffix,
                               tag=FINETUNE_TAG if finetuned else "", time_batch=config.trainer.time_batch)


def cmd_infer(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Nested prediction of one test sample; writes its composite fields.

    Example:
        ```bash
        python -m src.main infer --config configs/toy.json --sample 0
        # ... predictions: 13 pressure, 12 saturation (3 wells)
        ```
    """
    from src.utils.reports import write_fields
    from src.workflows.nested_pipeline import sequential_infer

    _, test = _load_split(args, config)
    if not test:
        raise EmptySplitError("test")
    if not 0 <= args.sample < len(test):
        raise ConfigurationError(f"--sample {args.sample} is outside the test split of {len(test)} samples")
    sample = test[args.sample]
    models = _models_for(args, config, test)
    tracing_service.reset("predict.")
    result = sequential_infer(models, sample, threads=args.threads)
    n_p, n_s = tracing_service.count("predict.pressure"), tracing_service.count("predict.saturation")
    logger.info(f"🔮 Sample {sample.id}: predictions: {n_p} pressure, {n_s} saturation ({sample.n_wells} wells)")
    path = Path(config.output_dir) / f"fields_{sample.id}.ngcs"
    write_fields(path, sample.id, {"pressure": result.pressure, "saturation": result.saturation})
    print(f"wrote {path}")
    return 0


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    """
    Metrics tables in sequential and separate mode, plus a comparison table.

    When fine-tuned checkpoints exist the comparison gains their columns.

    Raises:
        MetricUndefinedError: If every saturation value is undefined.
    """
    from src.errors import MissingCheckpointError
    from src.services.metrics_service import all_saturation_undefined
    from src.utils.reports import write_comparison_csv, write_distribution_csv, write_metrics_csv
    from src.workflows.nested_pipeline import evaluate_mode

    _, test = _load_split(args, config)
    if not test:
        raise EmptySplitError("test")
    out = Path(config.output_dir)
    variants = {"": _models_for(args, config, test)}
    if not args.oracle:
        try:
            variants["_finetuned"] = _models_for(args, config, test, finetuned=True)
        except MissingCheckpointError:
            logger.info("No fine-tuned checkpoints; comparison covers base models only")
    reports = {}
    for suffix, models in variants.items():
        for mode in ("sequential", "separate"):
            report = evaluate_mode(models, test, mode, threads=args.threads)
            reports[f"{mode}{suffix}"] = report
            write_metrics_csv(out / f"metrics_{mode}{suffix}.csv", report)
            write_distribution_csv(out / f"distribution_{mode}{suffix}.csv", report)
    write_comparison_csv(out / "comparison.csv", reports)
    if all_saturation_undefined(reports["sequential"]):
        raise MetricUndefinedError("saturation error is undefined for every test sample (empty plumes)")
    return 0


def cmd_study(args: argparse.Namespace, config: RunConfig) -> int:
    """Train restricted and baseline models for one study and write its table."""
    from src.services.synth_data import read_dataset
    from src.utils.reports import write_study_csv
    from src.workflows.experiments import run_study

    samples = read_dataset(_dataset_path(args, config))
    rows = run_study(args.kind, samples, config, threads=args.threads)
    write_study_csv(Path(config.output_dir) / f"study_{args.kind}.csv", rows)
    return 0


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    """Time batch sweep plus 3D vs 4D transform FLOP estimates."""
    from src.services.synth_data import read_dataset
    from src.utils.reports import write_bench_csv, write_flops_csv
    from src.workflows.experiments import run_bench

    result = run_bench(read_dataset(_dataset_path(args, config)), config)
    out = Path(config.output_dir)
    write_bench_csv(out / "bench.csv", result.rows)
    if result.flops is not None:
        write_flops_csv(out / "flops.csv", result.flops)
    return 0


def cmd_plot(args: argparse.Namespace, config: RunConfig) -> int:
    """Heatmaps and CSV slices for each composite field file given."""
    from src.utils.reports import plot_fields, read_fields

    for path in args.inputs:
        sample_id, fields = read_fields(path)
        plot_fields(fields, Path(config.output_dir) / "plots", prefix=f"sample{sample_id}", cmap=args.cmap)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "study": cmd_study,
    "bench": cmd_bench,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--threads", type=int, default=settings.threads, help="Worker threads (default 1)")
    common.add_argument("--dataset", help="Dataset path (overrides the config)")

    parser = argparse.ArgumentParser(prog="nested-fdon", description="Nested Fourier-DeepONet engine")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset")
    for name in ("train", "finetune"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-level", type=int)
    p = sub.add_parser("infer", parents=[common])
    p.add_argument("--sample", type=int, default=0, help="Index into the test split")
    p.add_argument("--max-level", type=int)
    p.add_argument("--oracle", action="store_true", help="Serve ground truth instead of checkpoints")
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--max-level", type=int)
    p.add_argument("--oracle", action="store_true", help="Serve ground truth instead of checkpoints")
    p = sub.add_parser("study", parents=[common])
    p.add_argument("kind", choices=["wells", "permeability", "rate", "time"])
    p.add_argument("--epochs", type=int)
    sub.add_parser("bench", parents=[common])
    p = sub.add_parser("plot", parents=[common])
    p.add_argument("inputs", nargs="+", help="Composite field files written by infer")
    p.add_argument("--cmap", default="viridis")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Parse ``argv``, run the command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    try:
        config = apply_overrides(args, load_run_config(args.config, args.seed, args.out))
        return COMMANDS[args.command](args, config)
    except EngineError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"❌ {args.command} failed: invalid configuration")
        print(f"error: {_format_validation(e)}", file=sys.stderr)
        return ConfigurationError.exit_code
    except OSError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 3
    finally:
        tracing_service.flush()


if __name__ == "__main__":
    sys.exit(main())
