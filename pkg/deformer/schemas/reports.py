"""Схемы отчётов и манифестов."""

from datetime import datetime
from typing import Any, Optional

from pydantic import BaseModel, Field, model_validator


class MetricsReport(BaseModel):
    """Метрики одного прогона оценки."""

    accuracy: float = Field(ge=0, le=1)
    macro_f1: float = Field(ge=0, le=1)
    per_class_f1: list[float]
    confusion: list[list[int]] = Field(
        description="Строки: истинный класс, столбцы: предсказание"
    )
    n_samples: int = Field(ge=1)

    @model_validator(mode="after")
    def check_confusion(self) -> "MetricsReport":
        if sum(map(sum, self.confusion)) != self.n_samples:
            raise ValueError("confusion matrix total must equal n_samples")
        if any(not 0.0 <= f1 <= 1.0 for f1 in self.per_class_f1):
            raise ValueError("per-class F1 outside [0, 1]")
        return self

    @property
    def support(self) -> list[int]:
        return [sum(row) for row in self.confusion]


class ShapeRow(BaseModel):
    name: str
    shape: tuple[int, ...]


class ShapeAudit(BaseModel):
    """Таблица форм всех промежуточных тензоров (без оси батча)."""

    rows: list[ShapeRow]
    kernel_len: int
    lengths: list[int]
    embedding_len: int

    def as_dict(self) -> dict[str, tuple[int, ...]]:
        return {row.name: row.shape for row in self.rows}


class TensorEntry(BaseModel):
    name: str
    group: str = Field(description="param | buffer | adam_m | adam_v")
    dtype: str
    shape: list[int]
    offset: int = Field(ge=0)
    nbytes: int = Field(ge=0)


class CheckpointManifest(BaseModel):
    format_version: int
    config: dict[str, Any]
    epoch: int
    best_val_acc: float
    optimizer_step: int
    rng: dict[str, int]
    blob_sha256: str
    blob_size: int
    tensors: list[TensorEntry]


class LosoSummary(BaseModel):
    """Сводка LOSO в форме таблицы с результатами: среднее и std по субъектам."""

    subjects: list[str]
    accuracy: list[float]
    macro_f1: list[float]
    acc_mean: float
    acc_std: float
    f1_mean: float
    f1_std: float
    std_kind: str = Field(default="population", description="population | sample")


class RunManifest(BaseModel):
    """Всё, что нужно для побитового повторения запуска."""

    command: list[str]
    config: dict[str, Any]
    seeds: dict[str, int]
    format_versions: dict[str, int]
    input_hashes: dict[str, str] = Field(default_factory=dict)
    package_version: str
    started_at: datetime
    finished_at: Optional[datetime] = None
