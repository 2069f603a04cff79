"""Общие фикстуры: игрушечная модель и маленький синтетический датасет."""

import numpy as np
import pytest

from deformer.core.config import settings
from deformer.models.deformer import EEGDeformer
from deformer.schemas.config import ModelConfig, Signature, SyntheticSpec, TrainConfig
from deformer.services.data import EEGDataset, SubjectData, generate_synthetic

SMALL_SPEC_TOML = """\
[data]
n_subjects = 3
trials_per_class = 6
channels = 4
segment_len = 64
sampling_rate = 64.0
signatures = [
    [],
    [{ channels = [1, 2], center_hz = 8.0, width_hz = 2.0, amplitude = 1.5 }],
]
"""


@pytest.fixture(autouse=True)
def _isolate_settings(monkeypatch):
    """DEFORMER_SEED и DEFORMER_WORKERS из окружения не должны влиять на тесты."""
    monkeypatch.setattr(settings, "seed", None)
    monkeypatch.setattr(settings, "workers", 1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig.preset("toy", precision="float64")


@pytest.fixture
def toy_model(toy_config) -> EEGDeformer:
    return EEGDeformer(toy_config, seed=0)


@pytest.fixture
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(
        n_subjects=3,
        trials_per_class=5,
        channels=4,
        segment_len=64,
        sampling_rate=64.0,
        signatures=[
            [],
            [Signature(channels=[1, 2], center_hz=8.0, width_hz=2.0, amplitude=1.5)],
        ],
    )


@pytest.fixture
def small_dataset(small_spec) -> EEGDataset:
    return generate_synthetic(small_spec, seed=7)


@pytest.fixture
def fast_train() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=8, seed=3)


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_SPEC_TOML, encoding="utf-8")
    return path


def _make_dataset(
    n_subjects: int = 3,
    per_subject: int = 10,
    channels: int = 2,
    length: int = 8,
    seed: int = 0,
) -> EEGDataset:
    """Случайный датасет с чередующимися метками."""
    gen = np.random.default_rng(seed)
    subjects = [
        SubjectData(
            subject_id=f"S{i + 1:02d}",
            segments=gen.normal(size=(per_subject, channels, length)),
            labels=np.arange(per_subject) % 2,
        )
        for i in range(n_subjects)
    ]
    return EEGDataset(subjects=subjects, sampling_rate=100.0, n_classes=2)


@pytest.fixture
def make_dataset():
    return _make_dataset

