"""Проверка градиентов центральными конечными разностями."""

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Union

import numpy as np

from deformer.core.logging import get_logger
from deformer.tensor.engine import Tensor
from deformer.tensor.rng import RngState

logger = get_logger("gradcheck")

Scalar = Union[Tensor, float]


def _as_float(value: Scalar) -> float:
    if isinstance(value, Tensor):
        return float(value.data.reshape(-1)[0])
    return float(value)


def finite_diff_grad(
    f: Callable[[Tensor], Scalar],
    x: Tensor,
    h: float = 1e-5,
    indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """(f(x + h·e) − f(x − h·e)) / 2h по каждому элементу ``x``.

    ``x.data`` меняется на месте и восстанавливается. ``indices`` (плоские)
    ограничивают набор элементов; остальные позиции результата равны нулю.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        original = flat[i]
        flat[i] = original + h
        f_plus = _as_float(f(x))
        flat[i] = original - h
        f_minus = _as_float(f(x))
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3
) -> float:
    """max по элементам |a − n| / max(|a|, |n|, floor).

    Каждый элемент сравнивается со своим масштабом; элементы меньше ``floor``
    сравниваются по абсолютной ошибке, отнесённой к ``floor``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale, initial=0.0))


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    total: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    samples: Optional[int] = None,
    rng: Optional[RngState] = None,
) -> list[GradCheckResult]:
    """Сравнение backward с конечными разностями для каждой группы параметров.

    ``loss_fn`` обязан быть детерминированным (eval-режим). Если задан
    ``samples``, в каждой группе проверяется не более ``samples`` случайных
    элементов.
    """
    for tensor in params.values():
        tensor.zero_grad()
    loss_fn().backward()

    rng = rng or RngState(seed=0)
    results = []
    for name, tensor in params.items():
        analytic = tensor.grad
        if analytic is None:
            analytic = np.zeros_like(tensor.data)
        indices = None
        if samples is not None and tensor.size > samples:
            indices = np.sort(rng.permutation(tensor.size)[:samples])
        numeric = finite_diff_grad(lambda _: loss_fn(), tensor, h=h, indices=indices)
        if indices is not None:
            analytic_view = analytic.reshape(-1)[indices]
            numeric_view = numeric.reshape(-1)[indices]
        else:
            analytic_view, numeric_view = analytic, numeric
        error = relative_error(np.asarray(analytic_view, np.float64), numeric_view)
        checked = tensor.size if indices is None else len(indices)
        results.append(GradCheckResult(name, error, checked, tensor.size))
        logger.debug(
            f"Gradient check {name}: rel. err {error:.3e}",
            extra={"param": name, "rel_error": error, "checked": checked},
        )
    return results
