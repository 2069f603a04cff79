"""Карты значимости: нормировка, усреднение, чистота и экспорт."""

import numpy as np
import pandas as pd
import pytest

from deformer.core.exceptions import CheckpointError, DimensionError, DomainError
from deformer.models.deformer import EEGDeformer
from deformer.schemas.config import ModelConfig, TrainConfig
from deformer.services.checkpoint import Checkpoint
from deformer.services.data import subject_split
from deformer.services.saliency import (
    SaliencyMap,
    average_saliency,
    export_saliency,
    input_gradient,
    matrix_path,
    minmax,
    saliency,
)
from deformer.services.training import fit
from deformer.utils.hashing import hash_arrays


@pytest.fixture
def toy_ckpt(toy_model) -> Checkpoint:
    return Checkpoint.from_model(toy_model)


@pytest.fixture
def segments(small_dataset) -> np.ndarray:
    return subject_split(small_dataset, ["S01"]).x


def test_minmax_bounds(rng):
    values = minmax(rng.normal(size=(4, 16)))
    assert values.min() == 0.0 and values.max() == 1.0


def test_minmax_of_constant_is_zero():
    np.testing.assert_array_equal(minmax(np.full((2, 3), 7.0)), np.zeros((2, 3)))


def test_map_is_normalised(toy_model, toy_ckpt, segments):
    smap = saliency(toy_model, toy_ckpt, segments[0], class_idx=1, subject_id="S01")
    assert smap.shape == (4, 64)
    assert smap.values.min() == 0.0 and smap.values.max() == 1.0
    assert smap.channel_scores.max() == 1.0
    assert smap.channel_names == ["Ch1", "Ch2", "Ch3", "Ch4"]


def test_zero_classifier_gives_zero_map(toy_model, segments):
    ckpt = Checkpoint.from_model(toy_model)
    ckpt.params["classifier.weight"] = np.zeros_like(ckpt.params["classifier.weight"])
    smap = saliency(toy_model, ckpt, segments, class_idx=0)
    np.testing.assert_array_equal(smap.values, 0.0)
    np.testing.assert_array_equal(smap.channel_scores, 0.0)


def test_classifier_bias_does_not_change_map(toy_model, toy_ckpt, segments):
    shifted = Checkpoint.from_model(toy_model)
    shifted.params["classifier.bias"] = shifted.params["classifier.bias"] + 5.0
    base = saliency(toy_model, toy_ckpt, segments[:3], class_idx=1)
    moved = saliency(toy_model, shifted, segments[:3], class_idx=1)
    np.testing.assert_allclose(base.values, moved.values, atol=1e-12)


def test_saliency_leaves_parameters_alone(toy_model, toy_ckpt, segments):
    params_before = hash_arrays(toy_ckpt.params)
    model_before = hash_arrays(toy_model.state_arrays()[0])
    saliency(toy_model, toy_ckpt, segments, class_idx=0)
    assert hash_arrays(toy_ckpt.params) == params_before
    assert hash_arrays(toy_model.state_arrays()[0]) == model_before
    assert all(t.grad is None for t in toy_model.named_parameters().values())


def test_checkpoint_from_other_ip_source_is_refused(toy_model, toy_ckpt, segments):
    coarse = EEGDeformer(toy_model.config.model_copy(update={"ip_source": "coarse"}))
    with pytest.raises(CheckpointError, match="ip_source"):
        saliency(coarse, toy_ckpt, segments[:2], class_idx=1)


@pytest.mark.parametrize("class_idx", [-1, 2])
def test_invalid_class(toy_model, segments, class_idx):
    with pytest.raises(DomainError):
        input_gradient(toy_model, segments[:1], class_idx)


def test_wrong_geometry(toy_model, toy_ckpt):
    with pytest.raises(DimensionError):
        saliency(toy_model, toy_ckpt, np.zeros((3, 64)), class_idx=0)


def test_values_must_lie_in_unit_interval():
    with pytest.raises(DomainError):
        SaliencyMap(
            values=np.full((2, 3), 1.5), channel_scores=np.zeros(2), class_idx=0
        )


class TestAverage:
    def test_single_map_is_unchanged(self, rng):
        smap = SaliencyMap.from_raw(rng.random((3, 8)), class_idx=1, subject_id="S02")
        averaged = average_saliency([smap])
        np.testing.assert_allclose(averaged.values, smap.values, atol=1e-12)
        assert averaged.subject_id == "S02"

    def test_identical_maps(self, rng):
        smap = SaliencyMap.from_raw(rng.random((3, 8)), class_idx=0)
        averaged = average_saliency([smap] * 4)
        np.testing.assert_allclose(averaged.values, smap.values, atol=1e-12)

    def test_complementary_maps_cancel(self):
        ones = SaliencyMap(np.ones((2, 4)), np.ones(2), class_idx=0, subject_id="A")
        zeros = SaliencyMap(np.zeros((2, 4)), np.zeros(2), class_idx=0, subject_id="B")
        averaged = average_saliency([ones, zeros])
        np.testing.assert_array_equal(averaged.values, 0.0)
        assert averaged.subject_id is None

    def test_empty(self):
        with pytest.raises(DomainError):
            average_saliency([])

    def test_geometry_mismatch(self):
        a = SaliencyMap(np.zeros((2, 4)), np.zeros(2), class_idx=0)
        b = SaliencyMap(np.zeros((3, 4)), np.zeros(3), class_idx=0)
        with pytest.raises(DimensionError):
            average_saliency([a, b])


class TestExport:
    def test_csv_round_trip(self, tmp_path, rng):
        smap = SaliencyMap.from_raw(
            rng.random((3, 5)), class_idx=0, channel_names=["Fz", "Cz", "Pz"]
        )
        path = export_saliency(smap, tmp_path / "map.csv")
        scores = pd.read_csv(path)
        assert list(scores.columns) == ["channel_name", "score"]
        assert scores["channel_name"].tolist() == ["Fz", "Cz", "Pz"]
        np.testing.assert_allclose(scores["score"], smap.channel_scores, atol=1e-6)

        assert matrix_path(path) == tmp_path / "map_matrix.csv"
        matrix = pd.read_csv(matrix_path(path), index_col="channel_name")
        assert matrix.shape == (3, 5)
        np.testing.assert_allclose(matrix.to_numpy(), smap.values, atol=1e-6)

    def test_pgm_layout(self, tmp_path, rng):
        smap = SaliencyMap.from_raw(rng.random((3, 5)), class_idx=0)
        data = export_saliency(smap, tmp_path / "map.pgm", format="pgm").read_bytes()
        header = b"P5\n5 3\n255\n"
        assert data.startswith(header)
        pixels = np.frombuffer(data[len(header):], dtype=np.uint8).reshape(3, 5)
        np.testing.assert_array_equal(pixels, np.round(smap.values * 255))


@pytest.mark.slow
def test_trained_model_highlights_signature_channels(small_dataset):
    config = ModelConfig.preset("toy", dropout_p=0.0)
    data = subject_split(small_dataset)
    model = EEGDeformer(config, seed=0)
    ckpt, _ = fit(model, data, data, TrainConfig(epochs=40, batch_size=10))
    positives = data.x[data.y == 1]
    smap = saliency(model, ckpt, positives, class_idx=1)
    assert smap.channel_scores[[1, 2]].mean() > smap.channel_scores[[0, 3]].mean()
