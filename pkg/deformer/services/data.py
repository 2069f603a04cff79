"""Синтетическая ЭЭГ, сегментация, разметка усталости и разбиения LOSO."""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from deformer.core.exceptions import (
    ConfigurationError,
    DomainError,
    SubjectLookupError,
)
from deformer.core.logging import get_logger
from deformer.schemas.config import SyntheticSpec
from deformer.tensor.rng import RngState

logger = get_logger("data")

FATIGUE = 0
NON_FATIGUE = 1


@dataclass(eq=False)
class SubjectData:
    """Сегменты одного субъекта: x [n, c, l] float32, метки [n]."""

    subject_id: str
    segments: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.segments = np.asarray(self.segments, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.segments.ndim != 3 or len(self.segments) == 0:
            raise DomainError(
                f"subject {self.subject_id!r} needs a nonempty [n, c, l] segment array",
                details={"shape": list(self.segments.shape)},
            )
        if self.labels.shape != (len(self.segments),):
            raise DomainError(
                f"subject {self.subject_id!r}: {len(self.labels)} labels for "
                f"{len(self.segments)} segments"
            )

    def __len__(self) -> int:
        return len(self.segments)


@dataclass(eq=False)
class EEGDataset:
    """Набор субъектов с общей геометрией (c, l)."""

    subjects: list[SubjectData]
    sampling_rate: float
    n_classes: int
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        geometries = {s.segments.shape[1:] for s in self.subjects}
        if len(geometries) > 1:
            raise DomainError(
                "all segments must share (c, l)",
                details={"geometries": sorted(geometries)},
            )
        for subject in self.subjects:
            if subject.labels.min() < 0 or subject.labels.max() >= self.n_classes:
                raise DomainError(
                    f"subject {subject.subject_id!r} has labels "
                    f"outside [0, {self.n_classes})"
                )
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DomainError(
                "subject ids must be unique", details={"subject_ids": ids}
            )
        if self.subjects and not self.channel_names:
            self.channel_names = [f"Ch{i + 1}" for i in range(self.geometry[0])]

    @property
    def geometry(self) -> tuple[int, int]:
        c, seg_len = self.subjects[0].segments.shape[1:]
        return int(c), int(seg_len)

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def n_segments(self) -> int:
        return sum(len(s) for s in self.subjects)

    def subject(self, subject_id: str) -> SubjectData:
        for subject in self.subjects:
            if subject.subject_id == subject_id:
                return subject
        raise SubjectLookupError(subject_id)

    def equals(self, other: "EEGDataset") -> bool:
        """Побитовое равенство."""
        if (
            self.sampling_rate != other.sampling_rate
            or self.n_classes != other.n_classes
            or self.channel_names != other.channel_names
            or self.subject_ids != other.subject_ids
        ):
            return False
        return all(
            a.segments.tobytes() == b.segments.tobytes()
            and a.segments.shape == b.segments.shape
            and np.array_equal(a.labels, b.labels)
            for a, b in zip(self.subjects, other.subjects)
        )


@dataclass(eq=False)
class DataSplit:
    """Часть данных: сегменты, метки и идентичность (subject_id, индекс)."""

    x: np.ndarray
    y: np.ndarray
    keys: list[tuple[str, int]]

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, indices: Sequence[int]) -> "DataSplit":
        idx = np.asarray(indices, dtype=np.int64)
        return DataSplit(self.x[idx], self.y[idx], [self.keys[i] for i in idx])


# Генерация


def pink_noise(
    rng: RngState, n_channels: int, n_points: int, exponent: float = 1.0
) -> np.ndarray:
    """Шум 1/f^α: белый спектр, умноженный на огибающую f^(-α/2).

    Постоянная составляющая обнуляется, каждый канал нормируется на единичное std.
    """
    n_freqs = n_points // 2 + 1
    gen = rng.next_generator()
    spectrum = gen.standard_normal((n_channels, n_freqs)) + 1j * gen.standard_normal(
        (n_channels, n_freqs)
    )
    freqs = np.arange(n_freqs, dtype=np.float64)
    freqs[0] = 1.0
    spectrum /= freqs ** (exponent / 2)
    spectrum[:, 0] = 0.0
    signal = np.fft.irfft(spectrum, n=n_points, axis=-1)
    std = signal.std(axis=-1, keepdims=True)
    std[std == 0] = 1.0
    return signal / std


def generate_synthetic(spec: SyntheticSpec, seed: int) -> EEGDataset:
    """Датасет как чистая функция (spec, seed)."""
    problems = spec.violations()
    if problems:
        raise ConfigurationError(
            f"Invalid synthetic spec: {problems[0]}", details={"errors": problems}
        )

    root = RngState(seed)
    length = spec.trial_len or spec.segment_len
    t = np.arange(length, dtype=np.float64) / spec.sampling_rate

    subjects = []
    for s in range(spec.n_subjects):
        subject_rng = root.fold_in(s)
        offset = subject_rng.split("jitter").uniform((1,), -1.0, 1.0)[0]
        jitter = 1.0 + spec.amplitude_jitter * offset
        segments: list[np.ndarray] = []
        labels: list[int] = []
        for cls, entries in enumerate(spec.signatures):
            class_rng = subject_rng.split(f"class-{cls}")
            for trial in range(spec.trials_per_class):
                trial_rng = class_rng.fold_in(trial)
                x = spec.noise_amplitude * pink_noise(
                    trial_rng, spec.channels, length, spec.noise_exponent
                )
                for sig in entries:
                    n = len(sig.channels)
                    low = sig.center_hz - sig.width_hz / 2
                    high = sig.center_hz + sig.width_hz / 2
                    freqs = trial_rng.uniform((n,), low, high)
                    phases = trial_rng.uniform((n,), 0.0, 2 * math.pi)
                    angle = 2 * math.pi * freqs[:, None] * t[None, :]
                    wave = np.sin(angle + phases[:, None])
                    x[sig.channels] += sig.amplitude * jitter * wave
                pieces = (
                    segment_trial(x, spec.segment_len, spec.overlap)
                    if spec.trial_len is not None
                    else [x]
                )
                segments.extend(pieces)
                labels.extend([cls] * len(pieces))
        subjects.append(
            SubjectData(
                subject_id=f"S{s + 1:02d}",
                segments=np.stack(segments).astype(np.float32),
                labels=np.asarray(labels),
            )
        )

    logger.info(
        f"Generated {spec.n_subjects} synthetic subjects",
        extra={"seed": seed, "segments": sum(len(s) for s in subjects)},
    )
    return EEGDataset(
        subjects=subjects,
        sampling_rate=spec.sampling_rate,
        n_classes=spec.n_classes,
        channel_names=spec.resolved_channel_names(),
    )


def segment_trial(trial: np.ndarray, window: int, overlap: float) -> list[np.ndarray]:
    """Скользящее окно с шагом round(window·(1 − overlap)).

    Число окон floor((L − window)/шаг) + 1.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must be in [0, 1), got {overlap}")
    length = trial.shape[-1]
    if window > length:
        raise DomainError(
            f"window {window} longer than trial ({length} samples): no segments",
            details={"window": window, "trial_len": length},
        )
    stride = int(round(window * (1.0 - overlap)))
    if stride < 1:
        raise ConfigurationError(
            f"window {window} with overlap {overlap} gives zero stride"
        )
    count = (length - window) // stride + 1
    return [trial[..., i * stride : i * stride + window].copy() for i in range(count)]


# Разметка усталости


def label_fatigue(rt_local: float, rt_global: float, rt_alert: float) -> Optional[int]:
    """0: усталость, 1: бодрость, None: испытание исключается.

    Неравенства строгие: равенство с 1.5·RT_a или 2.5·RT_a исключается.
    """
    if min(rt_local, rt_global, rt_alert) <= 0:
        raise DomainError(
            "reaction times must be positive",
            details={
                "rt_local": rt_local,
                "rt_global": rt_global,
                "rt_alert": rt_alert,
            },
        )
    if rt_local > 2.5 * rt_alert and rt_global > 2.5 * rt_alert:
        return FATIGUE
    if rt_local < 1.5 * rt_alert and rt_global < 1.5 * rt_alert:
        return NON_FATIGUE
    return None


def fatigue_labels_from_session(
    onsets: Sequence[float],
    local_rts: Sequence[float],
    window_s: float = 90.0,
    alert_percentile: float = 5.0,
) -> list[Optional[int]]:
    """Разметка всей сессии: глобальное RT равно среднему локальных RT в окне
    ``window_s`` секунд перед испытанием, RT бодрости равно 5-му перцентилю сессии."""
    onsets_arr = np.asarray(onsets, dtype=np.float64)
    rts = np.asarray(local_rts, dtype=np.float64)
    if onsets_arr.shape != rts.shape or rts.size == 0:
        raise DomainError(
            "onsets and reaction times must be nonempty and of equal length"
        )
    rt_alert = float(np.percentile(rts, alert_percentile))
    labels = []
    for onset, rt in zip(onsets_arr, rts):
        window = (onsets_arr < onset) & (onsets_arr >= onset - window_s)
        rt_global = float(rts[window].mean()) if window.any() else float(rt)
        labels.append(label_fatigue(float(rt), rt_global, rt_alert))
    return labels


# Разбиения


def _pool(subjects: Sequence[SubjectData]) -> DataSplit:
    x = np.concatenate([s.segments for s in subjects])
    y = np.concatenate([s.labels for s in subjects])
    keys = [(s.subject_id, i) for s in subjects for i in range(len(s))]
    return DataSplit(x, y, keys)


def subject_split(
    dataset: EEGDataset, subject_ids: Optional[Sequence[str]] = None
) -> DataSplit:
    """Все сегменты выбранных субъектов (по умолчанию всех)."""
    if not dataset.subjects:
        raise ConfigurationError("dataset has no subjects")
    if not subject_ids:
        return _pool(dataset.subjects)
    return _pool([dataset.subject(s) for s in subject_ids])


def _split_pool(
    subjects: Sequence[SubjectData], val_fraction: float, seed: int, per_subject: bool
) -> tuple[DataSplit, DataSplit]:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = RngState(seed).split("split")
    groups = [[s] for s in subjects] if per_subject else [list(subjects)]
    train_parts, val_parts = [], []
    for g, group in enumerate(groups):
        pool = _pool(group)
        order = rng.fold_in(g).permutation(len(pool))
        n_val = int(round(len(pool) * val_fraction))
        val_parts.append(pool.subset(order[:n_val]))
        train_parts.append(pool.subset(order[n_val:]))
    return _concat(train_parts), _concat(val_parts)


def _concat(parts: Sequence[DataSplit]) -> DataSplit:
    return DataSplit(
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.y for p in parts]),
        [key for p in parts for key in p.keys],
    )


def loso_split(
    dataset: EEGDataset,
    test_subject_id: str,
    val_fraction: float = 0.2,
    seed: int = 0,
    per_subject: bool = False,
) -> tuple[DataSplit, DataSplit, DataSplit]:
    """Тест: все сегменты одного субъекта; остальное делится на train/val."""
    if len(dataset.subjects) < 2:
        raise ConfigurationError("LOSO needs at least two subjects")
    test = _pool([dataset.subject(test_subject_id)])
    rest = [s for s in dataset.subjects if s.subject_id != test_subject_id]
    train, val = _split_pool(rest, val_fraction, seed, per_subject)
    return train, val, test


def train_val_split(
    dataset: EEGDataset,
    val_fraction: float = 0.2,
    seed: int = 0,
    per_subject: bool = False,
) -> tuple[DataSplit, DataSplit]:
    """Разбиение всех субъектов без отложенного теста."""
    if not dataset.subjects:
        raise ConfigurationError("dataset has no subjects")
    return _split_pool(dataset.subjects, val_fraction, seed, per_subject)


def export_segment_index(dataset: EEGDataset, path: Union[str, Path]) -> Path:
    """CSV с метаданными сегментов: subject_id, index, label."""
    frame = pd.DataFrame(
        [
            {"subject_id": s.subject_id, "index": i, "label": int(label)}
            for s in dataset.subjects
            for i, label in enumerate(s.labels)
        ],
        columns=["subject_id", "index", "label"],
    )
    path = Path(path)
    frame.to_csv(path, index=False)
    return path
