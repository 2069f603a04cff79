"""Функция потерь, Adam, расписание шага, метрики, обучение, чекпоинты и LOSO."""

import json
import logging
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

from deformer.core.config import Settings, settings
from deformer.core.exceptions import (
    CheckpointError,
    ConfigurationError,
    DomainError,
    FormatError,
    IntegrityError,
)
from deformer.models.deformer import EEGDeformer
from deformer.models.shapes import parameter_shapes
from deformer.schemas.config import ModelConfig, TrainConfig
from deformer.services.checkpoint import (
    BLOB_NAME,
    MANIFEST_NAME,
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from deformer.services.data import generate_synthetic, subject_split, train_val_split
from deformer.services.metrics import (
    accuracy,
    confusion_matrix,
    macro_f1,
    metrics_report,
)
from deformer.services.run_config import load_run_config
from deformer.services.training import (
    AdamState,
    adam_step,
    cosine_lr,
    cross_entropy,
    evaluate,
    fit,
    run_loso,
    summarize,
)
from deformer.tensor import ops
from deformer.tensor.engine import Tensor
from deformer.tensor.gradcheck import finite_diff_grad
from deformer.utils.hashing import hash_arrays


def t64(data, requires_grad=False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# Кросс-энтропия


def test_uniform_logits_give_log_two():
    assert cross_entropy(t64([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2))


def test_confident_correct_prediction():
    loss = cross_entropy(t64([[10.0, -10.0]]), [0])
    assert loss.item() == pytest.approx(0.0, abs=1e-8)


def test_cross_entropy_gradient(rng):
    logits = t64(rng.normal(size=(4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 2])
    cross_entropy(logits, labels).backward()
    probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    expected = (probs - np.eye(3)[labels]) / 4
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)
    numeric = finite_diff_grad(lambda t: cross_entropy(t, labels), logits)
    np.testing.assert_allclose(numeric, expected, atol=1e-9)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DomainError):
        cross_entropy(t64([[0.0, 0.0]]), [2])


# Adam


def _single_param(value: float):
    return {"p": t64([value], requires_grad=True)}


def test_adam_zero_gradient_keeps_parameter():
    params = _single_param(1.0)
    state = AdamState.zeros(params)
    adam_step(params, {"p": np.zeros(1)}, state, 1e-3, TrainConfig(weight_decay=0.0))
    assert params["p"].data[0] == 1.0


def test_adam_first_step_moves_by_lr():
    params = _single_param(1.0)
    state = AdamState.zeros(params)
    adam_step(params, {"p": np.ones(1)}, state, 1e-3, TrainConfig(weight_decay=0.0))
    assert params["p"].data[0] == pytest.approx(0.999, abs=1e-8)
    assert state.step == 1


def test_adam_coupled_weight_decay():
    params = _single_param(1.0)
    state = AdamState.zeros(params)
    adam_step(params, {"p": np.zeros(1)}, state, 1e-3, TrainConfig(weight_decay=1e-5))
    assert state.m["p"][0] == pytest.approx(0.1 * 1e-5)
    assert params["p"].data[0] < 1.0


def test_adam_step_reduces_quadratic_loss():
    params = {"p": t64([3.0, -2.0], requires_grad=True)}

    def loss():
        return ops.sum(params["p"] * params["p"])

    before = loss()
    before.backward()
    grads = {"p": params["p"].grad}
    adam_step(params, grads, AdamState.zeros(params), 0.1, TrainConfig())
    assert loss().item() < before.item()


# Расписание шага


def test_cosine_schedule_points():
    assert cosine_lr(0, 200, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(200, 200, 1e-3) == 0.0
    assert cosine_lr(100, 200, 1e-3, 1e-4) == pytest.approx((1e-3 + 1e-4) / 2)
    assert cosine_lr(250, 200, 1e-3, 1e-5) == 1e-5


def test_cosine_schedule_rejects_negative_epoch():
    with pytest.raises(ConfigurationError):
        cosine_lr(-1, 10, 1e-3)


@given(st.integers(min_value=1, max_value=500))
def test_cosine_schedule_is_nonincreasing(total):
    lrs = [cosine_lr(e, total, 1e-3) for e in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# Метрики


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 1], [0, 0]) == 0.0
    assert accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75


def test_macro_f1_examples():
    report = metrics_report([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert report.per_class_f1 == pytest.approx([2 / 3, 4 / 5])
    assert report.macro_f1 == pytest.approx(0.7333, abs=1e-4)
    assert report.confusion == [[1, 0], [1, 2]]
    assert report.support == [1, 3]
    assert macro_f1([1, 0, 1], [1, 0, 1], 2) == 1.0


def test_degenerate_class_counts_as_zero():
    assert macro_f1([0, 0], [0, 0], 2) == pytest.approx(0.5)


def test_empty_metrics_rejected():
    with pytest.raises(DomainError):
        accuracy([], [])
    with pytest.raises(DomainError):
        macro_f1([0], [0, 1], 2)


def _brute_force_macro_f1(preds, labels, n_classes):
    scores = []
    for cls in range(n_classes):
        tp = sum(1 for p, y in zip(preds, labels) if p == cls and y == cls)
        fp = sum(1 for p, y in zip(preds, labels) if p == cls and y != cls)
        fn = sum(1 for p, y in zip(preds, labels) if p != cls and y == cls)
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / n_classes


def test_macro_f1_matches_brute_force():
    gen = np.random.default_rng(9)
    for _ in range(1000):
        n_classes = int(gen.integers(2, 6))
        size = int(gen.integers(1, 40))
        preds = gen.integers(0, n_classes, size).tolist()
        labels = gen.integers(0, n_classes, size).tolist()
        assert macro_f1(preds, labels, n_classes) == pytest.approx(
            _brute_force_macro_f1(preds, labels, n_classes), abs=1e-12
        )


@hyp_settings(max_examples=50)
@given(
    st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=50),
    st.permutations([0, 1, 2, 3]),
)
def test_metrics_invariant_under_relabeling(pairs, perm):
    preds = [p for p, _ in pairs]
    labels = [y for _, y in pairs]
    relabeled_p = [perm[p] for p in preds]
    relabeled_y = [perm[y] for y in labels]
    assert accuracy(relabeled_p, relabeled_y) == accuracy(preds, labels)
    expected = macro_f1(preds, labels, 4)
    assert macro_f1(relabeled_p, relabeled_y, 4) == pytest.approx(expected)


def test_confusion_rows_are_true_labels():
    matrix = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
    np.testing.assert_array_equal(matrix, [[1, 1], [0, 1]])


# Обучение


@pytest.fixture
def toy_splits(small_dataset):
    return train_val_split(small_dataset, 0.2, seed=0)


def test_zero_lr_changes_only_batchnorm_statistics(toy_config, toy_splits):
    model = EEGDeformer(toy_config, seed=0)
    params_before, buffers_before = model.state_arrays()
    frozen = TrainConfig(lr0=0.0, epochs=1, batch_size=8, weight_decay=0.0)
    fit(model, *toy_splits, frozen)
    params_after, buffers_after = model.state_arrays()
    assert hash_arrays(params_before) == hash_arrays(params_after)
    assert hash_arrays(buffers_before) != hash_arrays(buffers_after)


def test_fit_is_bitwise_reproducible(toy_config, toy_splits, fast_train):
    runs = [
        fit(EEGDeformer(toy_config, seed=0), *toy_splits, fast_train) for _ in range(2)
    ]
    (ckpt_a, history_a), (ckpt_b, history_b) = runs
    assert hash_arrays(ckpt_a.params) == hash_arrays(ckpt_b.params)
    assert hash_arrays(ckpt_a.adam_m) == hash_arrays(ckpt_b.adam_m)
    pd.testing.assert_frame_equal(history_a, history_b)


def test_fit_history_and_best_epoch(toy_config, toy_splits, fast_train):
    ckpt, history = fit(EEGDeformer(toy_config, seed=0), *toy_splits, fast_train)
    assert list(history.columns) == ["epoch", "lr", "train_loss", "val_acc"]
    assert history["epoch"].tolist() == [1, 2]
    best = history["val_acc"].max()
    assert ckpt.best_val_acc == best
    assert ckpt.epoch == int(history.loc[history["val_acc"] == best, "epoch"].iloc[0])


def test_fit_rejects_empty_sets(toy_config, toy_splits, fast_train):
    train, val = toy_splits
    with pytest.raises(ConfigurationError):
        fit(EEGDeformer(toy_config), train.subset([]), val, fast_train)
    with pytest.raises(ConfigurationError):
        fit(EEGDeformer(toy_config), train, val.subset([]), fast_train)


def test_dropout_override_is_applied(toy_config, toy_splits):
    model = EEGDeformer(toy_config)
    ckpt, _ = fit(model, *toy_splits, TrainConfig(epochs=1, dropout_p=0.1))
    assert ckpt.config.dropout_p == 0.1


def test_evaluate_is_pure(toy_model, toy_splits):
    _, val = toy_splits
    ckpt = Checkpoint.from_model(toy_model)
    before = toy_model.state_arrays()
    first = evaluate(toy_model, ckpt, val)
    second = evaluate(toy_model, ckpt, val)
    after = toy_model.state_arrays()
    assert first == second
    assert sum(map(sum, first.confusion)) == len(val)
    assert hash_arrays(before[0]) == hash_arrays(after[0])
    assert hash_arrays(before[1]) == hash_arrays(after[1])


def test_evaluate_rejects_mismatched_checkpoint(toy_model, toy_splits):
    wide = EEGDeformer(ModelConfig.preset("toy", precision="float64", kernels=16))
    with pytest.raises(CheckpointError, match="encoder.temporal.weight"):
        evaluate(wide, Checkpoint.from_model(toy_model), toy_splits[1])


@pytest.mark.parametrize(
    "update",
    [{"ip_mode": "mean"}, {"ip_source": "coarse"}, {"sampling_rate": 70.0}],
)
def test_evaluate_rejects_checkpoint_with_other_forward_semantics(
    toy_model, toy_splits, update
):
    other = EEGDeformer(toy_model.config.model_copy(update=update), seed=0)
    with pytest.raises(CheckpointError, match=next(iter(update))):
        evaluate(other, Checkpoint.from_model(toy_model), toy_splits[1])


def test_saved_power_checkpoint_is_not_scored_as_mean(tmp_path, toy_model, toy_splits):
    path = save_checkpoint(Checkpoint.from_model(toy_model), tmp_path / "ckpt")
    mean_model = EEGDeformer(toy_model.config.model_copy(update={"ip_mode": "mean"}))
    expected = "ip_mode='power' in checkpoint vs 'mean'"
    with pytest.raises(CheckpointError, match=expected):
        evaluate(mean_model, load_checkpoint(path), toy_splits[1])


def test_training_only_fields_do_not_block_evaluation(toy_model, toy_splits):
    config = toy_model.config.model_copy(update={"dropout_p": 0.0, "bn_momentum": 0.3})
    checkpoint = Checkpoint.from_model(toy_model)
    report = evaluate(EEGDeformer(config), checkpoint, toy_splits[1])
    assert report == evaluate(toy_model, checkpoint, toy_splits[1])


# Чекпоинты


@pytest.fixture
def trained(toy_config, toy_splits, fast_train):
    ckpt, _ = fit(EEGDeformer(toy_config, seed=0), *toy_splits, fast_train)
    return ckpt


def test_checkpoint_round_trip_is_byte_identical(tmp_path, trained):
    first = save_checkpoint(trained, tmp_path / "a")
    second = save_checkpoint(load_checkpoint(first), tmp_path / "b")
    for name in (MANIFEST_NAME, BLOB_NAME):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_loaded_checkpoint_reproduces_logits(tmp_path, trained, small_dataset):
    restored = load_checkpoint(save_checkpoint(trained, tmp_path / "ckpt"))
    x = subject_split(small_dataset, ["S01"]).x
    np.testing.assert_array_equal(
        restored.to_model().predict_logits(x), trained.to_model().predict_logits(x)
    )
    assert restored.optimizer_step == trained.optimizer_step
    assert restored.rng == trained.rng


def test_manifest_lists_every_parameter_once(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "ckpt")
    manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    params = [entry for entry in manifest["tensors"] if entry["group"] == "param"]
    names = [entry["name"] for entry in params]
    assert sorted(names) == sorted(parameter_shapes(trained.config))
    assert len(names) == len(set(names))


def test_corrupted_blob_is_detected(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "ckpt")
    blob = bytearray((path / BLOB_NAME).read_bytes())
    blob[10] ^= 0xFF
    (path / BLOB_NAME).write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="checksum"):
        load_checkpoint(path)


def test_truncated_blob_is_detected(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "ckpt")
    (path / BLOB_NAME).write_bytes((path / BLOB_NAME).read_bytes()[:-8])
    with pytest.raises(IntegrityError, match="size"):
        load_checkpoint(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_missing_blob(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "ckpt")
    (path / BLOB_NAME).unlink()
    with pytest.raises(FormatError, match="blob not found") as info:
        load_checkpoint(path)
    assert info.value.details["path"] == str(path / BLOB_NAME)


def test_loading_into_mismatched_config(trained):
    model = EEGDeformer(ModelConfig.preset("toy", precision="float64", n_hct=1))
    with pytest.raises(CheckpointError):
        model.load_arrays(trained.params, trained.buffers)


# LOSO


def test_run_loso_reports_every_subject(toy_config, small_dataset):
    config = TrainConfig(epochs=1, batch_size=8)
    seen = []
    result = run_loso(
        small_dataset,
        toy_config,
        config,
        on_fold=lambda fold: seen.append(fold.subject_id),
    )
    assert seen == ["S01", "S02", "S03"]
    assert len(result.folds) == 3
    accs = [fold.report.accuracy for fold in result.folds]
    assert result.summary.acc_mean == pytest.approx(sum(accs) / 3)
    assert result.summary.acc_std == pytest.approx(float(np.std(accs)))
    assert all(fold.report.n_samples == 10 for fold in result.folds)


def test_parallel_loso_matches_serial(toy_config, small_dataset):
    config = TrainConfig(epochs=1, batch_size=8)
    serial = run_loso(small_dataset, toy_config, config, workers=1)
    parallel = run_loso(small_dataset, toy_config, config, workers=2)
    assert serial.summary == parallel.summary
    for a, b in zip(serial.folds, parallel.folds):
        assert hash_arrays(a.checkpoint.params) == hash_arrays(b.checkpoint.params)


def test_workers_setting_reads_environment(monkeypatch):
    monkeypatch.setenv("DEFORMER_WORKERS", "3")
    assert Settings().workers == 3


def _started_workers(caplog) -> int:
    started = [r for r in caplog.records if r.getMessage().startswith("Starting LOSO")]
    record = started[0]
    return record.workers


def test_loso_falls_back_to_workers_setting(
    toy_config, small_dataset, caplog, monkeypatch
):
    monkeypatch.setattr(settings, "workers", 2)
    caplog.set_level(logging.INFO, logger="deformer")
    result = run_loso(small_dataset, toy_config, TrainConfig(epochs=1, batch_size=8))
    assert _started_workers(caplog) == 2
    assert result.summary.subjects == ["S01", "S02", "S03"]


def test_train_config_workers_win_over_setting(
    toy_config, small_dataset, caplog, monkeypatch
):
    monkeypatch.setattr(settings, "workers", 2)
    caplog.set_level(logging.INFO, logger="deformer")
    run_loso(small_dataset, toy_config, TrainConfig(epochs=1, batch_size=8, workers=1))
    assert _started_workers(caplog) == 1


def test_fold_errors_carry_subject(toy_config, small_dataset):
    with pytest.raises(ConfigurationError, match="^subject S01:") as info:
        run_loso(small_dataset, toy_config, TrainConfig(epochs=1, val_fraction=0.01))
    assert info.value.details["subject_id"] == "S01"


def test_loso_needs_matching_geometry(small_dataset):
    with pytest.raises(ConfigurationError):
        run_loso(small_dataset, ModelConfig.preset("dataset-ii"), TrainConfig(epochs=1))


def test_summary_std_kinds():
    reports = [metrics_report([0, 1], [0, 1], 2), metrics_report([0, 0], [0, 1], 2)]
    population = summarize(["A", "B"], reports)
    sample = summarize(["A", "B"], reports, sample_std=True)
    assert population.acc_std == pytest.approx(0.25)
    assert sample.acc_std == pytest.approx(math.sqrt(0.125))
    assert (population.std_kind, sample.std_kind) == ("population", "sample")


# Длинные прогоны


@pytest.mark.slow
def test_toy_model_overfits_training_data(small_dataset):
    config = ModelConfig.preset("toy", dropout_p=0.0)
    data = subject_split(small_dataset)
    model = EEGDeformer(config, seed=0)
    train_config = TrainConfig(epochs=60, batch_size=10, weight_decay=0.0)
    ckpt, _ = fit(model, data, data, train_config)
    assert evaluate(model, ckpt, data).accuracy > 0.95


@pytest.mark.slow
def test_synthetic_task_is_learnable():
    run = load_run_config("synthetic")
    assert (run.data.n_subjects, run.train.epochs) == (10, 50)
    dataset = generate_synthetic(run.data, seed=0)
    result = run_loso(dataset, run.model, run.train, workers=4)
    assert result.summary.acc_mean >= 0.9
    for fold in result.folds:
        losses = fold.history["train_loss"]
        assert losses.iloc[19] <= 0.5 * losses.iloc[0]


@pytest.mark.slow
def test_zero_amplitude_stays_at_chance():
    run = load_run_config("chance")
    assert run.data.n_subjects == 10
    dataset = generate_synthetic(run.data, seed=0)
    result = run_loso(dataset, run.model, run.train, workers=4)
    assert abs(result.summary.acc_mean - 0.5) <= 0.1
