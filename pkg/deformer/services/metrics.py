"""Метрики классификации: точность, macro-F1, матрица ошибок."""

from typing import Sequence, Union

import numpy as np

from deformer.core.exceptions import DomainError
from deformer.schemas.reports import MetricsReport

Labels = Union[Sequence[int], np.ndarray]


def _validate(preds: Labels, labels: Labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.size == 0:
        raise DomainError("metrics need at least one prediction")
    if p.shape != y.shape:
        raise DomainError(f"{p.size} predictions for {y.size} labels")
    return p, y


def confusion_matrix(preds: Labels, labels: Labels, n_classes: int) -> np.ndarray:
    """Строки: истинный класс, столбцы: предсказание."""
    p, y = _validate(preds, labels)
    if min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= n_classes:
        raise DomainError(f"class indices outside [0, {n_classes})")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (y, p), 1)
    return matrix


def accuracy(preds: Labels, labels: Labels) -> float:
    p, y = _validate(preds, labels)
    return float(np.mean(p == y))


def per_class_f1(matrix: np.ndarray) -> np.ndarray:
    """2TP / (2TP + FP + FN); класс без истинных и предсказанных примеров даёт 0."""
    tp = np.diag(matrix).astype(np.float64)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(preds: Labels, labels: Labels, n_classes: int) -> float:
    return float(per_class_f1(confusion_matrix(preds, labels, n_classes)).mean())


def metrics_report(preds: Labels, labels: Labels, n_classes: int) -> MetricsReport:
    matrix = confusion_matrix(preds, labels, n_classes)
    f1 = per_class_f1(matrix)
    return MetricsReport(
        accuracy=float(np.trace(matrix) / matrix.sum()),
        macro_f1=float(f1.mean()),
        per_class_f1=f1.tolist(),
        confusion=matrix.tolist(),
        n_samples=int(matrix.sum()),
    )
