"""Tests for the nested prediction chain, evaluation modes and fine-tuning."""

import numpy as np
import pytest

from src.errors import ContractError, MissingCheckpointError, ShapeError
from src.models import GenConfig, RunConfig, Schedule, SimConfig, TimeGrid, TrainerConfig
from src.services.geometry import extract_window, inject
from src.services.operator_model import build, forward
from src.services.oracle_model import OracleModel
from src.services.synth_data import synth_data_service
from src.services.tracing_service import tracing_service
from src.services.trainer import l2_relative_loss, train_level
from src.workflows.nested_pipeline import (
    ErrorBank,
    NestedModelSet,
    NetworkPredictor,
    _model_seed,
    assemble_level_input,
    build_error_bank,
    composite_fields,
    evaluate_mode,
    finetune,
    level_arch,
    level_examples,
    noised_input,
    predict_levels,
    sequential_infer,
    train_models,
)
from tests.conftest import make_sample


def oracle_set(samples, depth=4, offset=0.0) -> NestedModelSet:
    return NestedModelSet(**OracleModel.for_levels(samples, depth, offset))


def test_level_inputs(sample):
    level0 = assemble_level_input(sample, 0, "pressure")
    assert level0.shape == (4, 20, 20, 5)

    level1 = assemble_level_input(sample, 1, "saturation", well=0)
    assert level1.shape == (4, 5, 8, 8, 5)
    window = extract_window(sample.pressure0, sample.config.wells[0], sample.geometry)
    np.testing.assert_allclose(level1[:, 4], inject(window, (2, 2, 1)) / 100.0)

    level3 = assemble_level_input(sample, 3, "saturation", well=2, time_index=np.array([1, 3]))
    assert level3.shape == (2, 5, 8, 8, 5)
    np.testing.assert_allclose(level3[:, 4], sample.truth("saturation", 2, 2)[[1, 3]])
    np.testing.assert_allclose(level3[0, :4], level3[1, :4])


def test_prediction_source_uses_given_field(sample):
    prev = sample.truth("pressure", 1, 0) + 50.0
    branch = assemble_level_input(sample, 2, "pressure", "prediction", well=0, prev=prev)
    np.testing.assert_allclose(branch[:, 4], sample.truth("pressure", 1, 0) / 100.0 + 0.5)


def test_level_input_contract_errors(sample):
    with pytest.raises(ContractError):
        assemble_level_input(sample, 0, "saturation")
    with pytest.raises(ContractError):
        assemble_level_input(sample, 2, "pressure", "prediction", well=0)
    with pytest.raises(ContractError):
        assemble_level_input(sample, 1, "pressure")
    with pytest.raises(ContractError):
        assemble_level_input(sample, 1, "pressure", well=4)


def test_sequential_inference_call_counts(sample):
    result = sequential_infer(oracle_set([sample]), sample)
    assert tracing_service.count("predict.pressure") == 4 * 4 + 1
    assert tracing_service.count("predict.saturation") == 4 * 4
    assert len(result.raw.pressure) == 4 and len(result.raw.pressure[0]) == 4
    assert result.pressure.level0.shape == (4, 20, 20, 5)


def test_oracle_evaluation_is_exact(samples):
    for mode in ("sequential", "separate"):
        report = evaluate_mode(oracle_set(samples), samples, mode)
        assert report.mode == mode and report.n_samples == len(samples)
        for entry in report.entries:
            if entry.field == "pressure" or entry.level != "total":
                assert entry.value is None or entry.value == pytest.approx(0.0, abs=1e-12), entry
        assert report.value("pressure", "total") == pytest.approx(0.0, abs=1e-12)
        levels = {(e.field, e.level) for e in report.entries}
        assert ("pressure", "4") in levels and ("saturation", "1") in levels
        assert ("saturation", "0") not in levels


def test_biased_oracle_reports_its_offset(sample):
    report = evaluate_mode(oracle_set([sample], depth=1, offset=2.0), [sample], "separate")
    expected = float(np.mean(2.0 / sample.p_max))
    assert report.value("pressure", "0") == pytest.approx(expected)
    assert report.value("pressure", "1") == pytest.approx(expected)


def test_threads_do_not_change_predictions(sample):
    models = oracle_set([sample], offset=0.1)
    one = predict_levels(models, sample, "sequential", threads=1)
    many = predict_levels(models, sample, "sequential", threads=3)
    for a, b in zip(one.saturation, many.saturation):
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


def test_predict_levels_contract_errors(sample):
    models = oracle_set([sample])
    with pytest.raises(ContractError):
        predict_levels(models, sample, "parallel")
    shallow = make_sample(locations=[(3, 3)], max_level=2)
    with pytest.raises(ContractError):
        predict_levels(oracle_set([shallow]), shallow)


def test_model_set_validation(sample):
    oracles = OracleModel.for_levels([sample], 2)
    with pytest.raises(ContractError):
        NestedModelSet(oracles["pressure"], {0: oracles["pressure"][0], **oracles["saturation"]})
    with pytest.raises(ContractError):
        NestedModelSet(oracles["pressure"], {1: oracles["saturation"][1]})
    assert NestedModelSet(**oracles).max_level == 2


def test_error_bank_and_noise(samples, rng):
    bank = build_error_bank(OracleModel("pressure", 0, samples, offset=0.5), samples, 0, "pressure")
    assert len(bank) == len(samples)
    np.testing.assert_allclose(bank.mean(), 0.5)

    truth = samples[0].pressure0
    np.testing.assert_allclose(noised_input(truth, bank, rng), truth + 0.5)
    with pytest.raises(ContractError):
        noised_input(truth, ErrorBank(level=0, field_kind="pressure"), rng)
    with pytest.raises(ShapeError):
        noised_input(truth[:2], bank, rng)

    clean = level_examples(samples, 1, "pressure")
    noisy = level_examples(samples, 1, "pressure", bank=bank, noise_rng=rng)
    assert len(clean) == sum(s.n_wells for s in samples)
    np.testing.assert_allclose(noisy[0].branch_in[:, 4], clean[0].branch_in[:, 4] + 0.005)
    np.testing.assert_array_equal(noisy[0].target, clean[0].target)


def test_finetune_with_zero_residuals_matches_continued_training(sample):
    config = RunConfig()
    trainer = TrainerConfig(time_batch=2)
    network = build(level_arch(config, 1), 21)
    oracles = OracleModel.for_levels([sample], 1)
    models = NestedModelSet(
        pressure={0: oracles["pressure"][0], 1: NetworkPredictor(network, "pressure", 1)},
        saturation=oracles["saturation"],
    )
    tuned, histories = finetune(models, [("pressure", 1)], [sample], epochs=2, trainer=trainer, seed=3)

    reference = network.copy()
    _, expected = train_level(reference, level_examples([sample], 1, "pressure"), 2, trainer,
                              rng=np.random.default_rng(_model_seed(3, "pressure", 1)))

    assert [r.loss for r in histories[("pressure", 1)]] == [r.loss for r in expected]
    tuned_model = tuned.get("pressure", 1).model
    for name, value in reference.named_parameters():
        np.testing.assert_array_equal(tuned_model.get_parameter(name), value, err_msg=name)
    # the untuned set is unchanged
    assert models.get("pressure", 1).model is network
    assert tuned.get("saturation", 1) is models.get("saturation", 1)


def test_finetune_rejects_level_zero(sample):
    with pytest.raises(ContractError):
        finetune(oracle_set([sample], depth=1), [("pressure", 0)], [sample], epochs=1)


def test_train_save_and_load(tmp_path, samples):
    run = train_models(samples, RunConfig(), max_level=1, epochs=0, seed=4)
    assert run.models.max_level == 1
    assert run.histories[("pressure", 0)] == []
    paths = run.models.save(tmp_path)
    assert sorted(p.name for p in paths) == ["pressure_L0.fdon", "pressure_L1.fdon", "saturation_L1.fdon"]

    loaded = NestedModelSet.load(tmp_path, 1)
    for field_kind, level, predictor in run.models.entries():
        other = loaded.get(field_kind, level).model
        for name, value in predictor.model.named_parameters():
            np.testing.assert_array_equal(other.get_parameter(name), value)

    with pytest.raises(MissingCheckpointError):
        NestedModelSet.load(tmp_path, 2)
    with pytest.raises(MissingCheckpointError):
        NestedModelSet.load(tmp_path, 1, tag="_ft")


def test_network_predictions_are_physical(sample):
    run = train_models([sample], RunConfig(), max_level=1, epochs=0, seed=0)
    raw = predict_levels(run.models, sample)
    assert raw.pressure0.shape == (4, 20, 20, 5)
    assert raw.saturation[3][0].shape == (4, 8, 8, 5)


def test_composite_fields_replaces_covered_cells(sample):
    windows = [w.window for w in sample.wells]
    level0 = np.zeros_like(sample.pressure0)
    per_well = [[np.full_like(arr, 3.0) for arr in w.pressure] for w in sample.wells]
    composite = composite_fields(sample.geometry, level0, windows, per_well)
    for window in windows:
        np.testing.assert_array_equal(composite.level0[(Ellipsis,) + window.slices()], 3.0)
    assert np.count_nonzero(composite.level0) == len(windows) * level0.shape[0] * int(np.prod(
        [s.stop - s.start for s in windows[0].slices()]))
    np.testing.assert_array_equal(level0, 0.0)
    with pytest.raises(ContractError):
        composite_fields(sample.geometry, level0, [windows[0], windows[0]], [per_well[0], per_well[0]])


def test_noise_draws_residuals_uniformly():
    shape = (2, 3, 3, 2)
    bank = ErrorBank(level=1, field_kind="pressure", residuals=[np.full(shape, float(i)) for i in range(5)])
    rng = np.random.default_rng(11)
    draws = [int(noised_input(np.zeros(shape), bank, rng)[0, 0, 0, 0]) for _ in range(5000)]
    counts = np.bincount(draws, minlength=5)
    chi2 = float(np.sum((counts - 1000.0) ** 2 / 1000.0))
    # 99.9th percentile of chi-square with 4 degrees of freedom
    assert chi2 < 18.47


@pytest.mark.slow
def test_training_on_generated_data_reduces_loss():
    physics = SimConfig(times=TimeGrid(snapshots=[0.5, 1.0]))
    samples = synth_data_service.generate(GenConfig(n_samples=2, seed=3, max_level=0, physics=physics))
    config = RunConfig()
    examples = level_examples(samples, 0, "pressure")
    model = build(level_arch(config, 0), 7)

    def loss() -> float:
        return float(np.mean([l2_relative_loss(forward(model, ex.branch_in, ex.times), ex.target) for ex in examples]))

    before = loss()
    trainer = TrainerConfig(time_batch=2, schedule=Schedule(base_lr=0.01, decay=1.0, period=1))
    train_level(model, examples, 30, trainer, rng=np.random.default_rng(0))
    assert loss() < before
