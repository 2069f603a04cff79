"""Карты значимости по градиенту логита относительно входа."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd

from deformer.core.exceptions import (
    AppException,
    ConfigurationError,
    DimensionError,
    DomainError,
)
from deformer.core.logging import get_logger
from deformer.models.deformer import EEGDeformer
from deformer.services.checkpoint import Checkpoint
from deformer.tensor import ops
from deformer.tensor.engine import Tensor

logger = get_logger("saliency")

ExportFormat = Literal["csv", "pgm"]


def minmax(values: np.ndarray) -> np.ndarray:
    """Нормировка в [0, 1]; при нулевом размахе нули."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


@dataclass(eq=False)
class SaliencyMap:
    """Нормированная карта [c, l] и оценки каналов [c]; все значения в [0, 1]."""

    values: np.ndarray
    channel_scores: np.ndarray
    class_idx: int
    subject_id: Optional[str] = None
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.channel_scores = np.asarray(self.channel_scores, dtype=np.float64)
        scores_shape = self.channel_scores.shape
        if self.values.ndim != 2 or scores_shape != (self.values.shape[0],):
            raise DimensionError(
                f"saliency map {self.values.shape} and scores {scores_shape} "
                "must be [c, l] and [c]"
            )
        arrays = (("values", self.values), ("channel_scores", self.channel_scores))
        for label, array in arrays:
            if not np.all((array >= 0.0) & (array <= 1.0)):
                raise DomainError(f"saliency {label} outside [0, 1]")
        if not self.channel_names:
            self.channel_names = [f"Ch{i + 1}" for i in range(self.values.shape[0])]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @classmethod
    def from_raw(
        cls,
        raw: np.ndarray,
        class_idx: int,
        subject_id: Optional[str] = None,
        channel_names: Optional[list[str]] = None,
    ) -> "SaliencyMap":
        values = minmax(raw)
        return cls(
            values=values,
            channel_scores=minmax(values.mean(axis=1)),
            class_idx=class_idx,
            subject_id=subject_id,
            channel_names=list(channel_names or []),
        )


def input_gradient(model: EEGDeformer, x: np.ndarray, class_idx: int) -> np.ndarray:
    """∂ logit[class_idx] / ∂X в eval-режиме, по каждому сегменту [n, c, l]."""
    config = model.config
    if not 0 <= class_idx < config.n_classes:
        raise DomainError(
            f"class index {class_idx} outside [0, {config.n_classes})",
            details={"class_idx": class_idx},
        )
    inputs = Tensor(np.asarray(x, dtype=config.dtype), requires_grad=True)
    logits, _ = model.forward(inputs, "eval")
    ops.sum(logits[:, class_idx]).backward()
    assert inputs.grad is not None
    return np.asarray(inputs.grad, dtype=np.float64)


def saliency(
    model: EEGDeformer,
    checkpoint: Checkpoint,
    x: np.ndarray,
    class_idx: int,
    subject_id: Optional[str] = None,
    channel_names: Optional[list[str]] = None,
) -> SaliencyMap:
    """|∂ logit / ∂X|, нормированный min-max.

    Для пачки [n, c, l] модули градиентов усредняются по сегментам до нормировки.
    Параметры чекпоинта и модели не меняются.
    """
    x = np.asarray(x)
    batch = x[None] if x.ndim == 2 else x
    geometry = (model.config.channels, model.config.segment_len)
    if batch.ndim != 3 or batch.shape[1:] != geometry:
        raise DimensionError(
            f"input {x.shape} does not match geometry "
            f"(c={model.config.channels}, l={model.config.segment_len})"
        )
    twin = checkpoint.restore(model)
    raw = np.abs(input_gradient(twin, batch, class_idx)).mean(axis=0)
    return SaliencyMap.from_raw(raw, class_idx, subject_id, channel_names)


def average_saliency(maps: Sequence[SaliencyMap]) -> SaliencyMap:
    """Поэлементное среднее с повторной нормировкой."""
    if not maps:
        raise DomainError("cannot average an empty list of saliency maps")
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise DimensionError(f"saliency maps differ in geometry: {sorted(shapes)}")
    subjects = {m.subject_id for m in maps}
    return SaliencyMap.from_raw(
        np.mean([m.values for m in maps], axis=0),
        class_idx=maps[0].class_idx,
        subject_id=subjects.pop() if len(subjects) == 1 else None,
        channel_names=maps[0].channel_names,
    )


def matrix_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}_matrix{path.suffix or '.csv'}")


def export_saliency(
    smap: SaliencyMap, path: Union[str, Path], format: ExportFormat = "csv"
) -> Path:
    """CSV: строки (channel_name, score) и матрица в ``<stem>_matrix.csv``;
    PGM: 8-битное изображение шириной l и высотой c."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if format == "csv":
            pd.DataFrame(
                {"channel_name": smap.channel_names, "score": smap.channel_scores}
            ).to_csv(path, index=False)
            matrix = pd.DataFrame(
                smap.values, columns=[f"t{j}" for j in range(smap.shape[1])]
            )
            matrix.insert(0, "channel_name", smap.channel_names)
            matrix.to_csv(matrix_path(path), index=False)
        elif format == "pgm":
            height, width = smap.shape
            pixels = np.round(smap.values * 255).astype(np.uint8)
            path.write_bytes(b"P5\n%d %d\n255\n" % (width, height) + pixels.tobytes())
        else:
            raise ConfigurationError(f"unknown saliency export format {format!r}")
    except OSError as exc:
        raise AppException(
            f"cannot write saliency export to {path}: {exc.strerror}",
            details={"path": str(path)},
        ) from exc
    logger.info(
        f"Saliency exported to {path}", extra={"path": str(path), "format": format}
    )
    return path
