"""Примитивы движка: арифметика, свёртки, нормализации, активации.

Все операции принимают ведущую ось батча. Свёртки используют соглашение
корреляции (ядро не переворачивается) и same-padding по времени.
"""

import math
from typing import Any, Literal, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from deformer.core.exceptions import ConfigurationError, ContractError, DimensionError
from deformer.tensor.engine import Function, Tensor
from deformer.tensor.rng import RngState

Mode = Literal["train", "eval"]
Axis = Union[None, int, Sequence[int]]


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(sorted(a % ndim for a in axis))


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")


# Поэлементная арифметика


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        left, right = self.shapes
        return self.unbroadcast(grad, left), self.unbroadcast(grad, right)


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        left, right = self.shapes
        return self.unbroadcast(grad, left), self.unbroadcast(-grad, right)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (
            self.unbroadcast(grad / self.b, self.a.shape),
            self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Pow(Function):
    def forward(self, x: np.ndarray, exponent: float) -> np.ndarray:
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.exponent * self.x ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.log(x)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad / self.x,)


class Sqrt(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad / (2 * self.out),)


# Редукции и перестановки


class Sum(Function):
    def forward(
        self, x: np.ndarray, axis: Axis = None, keepdims: bool = False
    ) -> np.ndarray:
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def _expand(self, grad: np.ndarray) -> np.ndarray:
        if not self.keepdims:
            kept = [1 if a in self.axes else n for a, n in enumerate(self.shape)]
            grad = grad.reshape(kept)
        return np.broadcast_to(grad, self.shape).copy()

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (self._expand(grad),)


class Mean(Sum):
    def forward(
        self, x: np.ndarray, axis: Axis = None, keepdims: bool = False
    ) -> np.ndarray:
        out = super().forward(x, axis=axis, keepdims=keepdims)
        self.count = math.prod(x.shape[a] for a in self.axes)
        return out / x.dtype.type(self.count)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (self._expand(grad) / grad.dtype.type(self.count),)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.shape),)


class Permute(Function):
    def forward(self, x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad.transpose(self.inverse),)


class GetItem(Function):
    def forward(self, x: np.ndarray, index: Any) -> np.ndarray:
        self.shape, self.index = x.shape, index
        return np.array(x[index])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return (
            self.unbroadcast(grad_a, self.a.shape),
            self.unbroadcast(grad_b, self.b.shape),
        )


# Сеть


class MaxPool(Function):
    """Окно 2, шаг 2; нечётный хвост отбрасывается, градиент идёт в первый максимум."""

    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis % x.ndim
        moved = np.moveaxis(x, self.axis, -1)
        n = moved.shape[-1] // 2
        pairs = moved[..., : 2 * n].reshape(moved.shape[:-1] + (n, 2))
        self.moved_shape = moved.shape
        self.index = pairs.argmax(axis=-1)
        out = np.take_along_axis(pairs, self.index[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(np.moveaxis(out, -1, self.axis))

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        moved = np.moveaxis(grad, self.axis, -1)
        n = moved.shape[-1]
        pairs = np.zeros(moved.shape + (2,), dtype=grad.dtype)
        np.put_along_axis(pairs, self.index[..., None], moved[..., None], axis=-1)
        out = np.zeros(self.moved_shape, dtype=grad.dtype)
        out[..., : 2 * n] = pairs.reshape(moved.shape[:-1] + (2 * n,))
        return (np.moveaxis(out, -1, self.axis),)


class Softmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad - self.probs * grad.sum(axis=self.axis, keepdims=True),)


class ELU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * np.where(self.x > 0, 1, np.exp(np.minimum(self.x, 0))),)


class GELU(Function):
    """Точная форма x·Φ(x)."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.cdf = ndtr(x).astype(x.dtype, copy=False)
        return x * self.cdf

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        pdf = np.exp(-0.5 * self.x * self.x) / math.sqrt(2 * math.pi)
        return (grad * (self.cdf + self.x * pdf),)


class TimeConv(Function):
    """Корреляция по последней оси со смешиванием по оси 1.

    x: [B, k_in, *mid, L], w: [k_out, k_in, κ], b: [k_out] -> [B, k_out, *mid, L].
    """

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        kappa = w.shape[-1]
        self.pad = kappa // 2
        padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(self.pad, self.pad)])
        self.padded_shape = padded.shape
        self.windows = sliding_window_view(padded, kappa, axis=-1)
        self.w = w
        out = np.tensordot(self.windows, w, axes=([1, x.ndim], [1, 2]))
        out = np.moveaxis(out, -1, 1)
        return np.ascontiguousarray(out + b.reshape((1, -1) + (1,) * (x.ndim - 2)))

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        reduce_axes = tuple(a for a in range(grad.ndim) if a != 1)
        grad_b = grad.sum(axis=reduce_axes)
        grad_w = np.tensordot(grad, self.windows, axes=(reduce_axes, reduce_axes))

        spread = np.tensordot(grad, self.w, axes=([1], [0]))
        length = grad.shape[-1]
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for t in range(self.w.shape[-1]):
            grad_padded[..., t : t + length] += np.moveaxis(spread[..., t], -1, 1)
        grad_x = grad_padded[..., self.pad : self.pad + length]
        return grad_x, grad_w, grad_b


class SpatialConv(Function):
    """Ядро (c, 1) без паддинга.

    x [B, k_in, c, L], w [k_out, k_in, c, 1] -> [B, k_out, 1, L].
    """

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.x, self.w = x, w[..., 0]
        out = np.tensordot(x, self.w, axes=([1, 2], [1, 2]))
        out = np.moveaxis(out, -1, 1)[:, :, None, :]
        return np.ascontiguousarray(out + b[None, :, None, None])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        flat = grad[:, :, 0, :]
        grad_w = np.tensordot(flat, self.x, axes=([0, 2], [0, 3]))[..., None]
        grad_x = np.tensordot(flat, self.w, axes=([1], [0])).transpose(0, 2, 3, 1)
        grad_b = flat.sum(axis=(0, 2))
        return grad_x, grad_w, grad_b


# Функциональный интерфейс


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def power(x: Tensor, exponent: float) -> Tensor:
    return Pow.apply(x, exponent=exponent)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Reshape.apply(x, shape=shape)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    return Permute.apply(x, axes=axes)


def getitem(x: Tensor, index: Any) -> Tensor:
    return GetItem.apply(x, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Матричное произведение с broadcasting ведущих осей."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}",
            details={"a": list(a.shape), "b": list(b.shape)},
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}",
            details={"a": list(a.shape), "b": list(b.shape)},
        ) from None
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def maxpool(x: Tensor, axis: int = -1) -> Tensor:
    """Неперекрывающийся max-pooling (окно 2, шаг 2) вдоль ``axis``."""
    if x.shape[axis] < 2:
        raise DimensionError(
            f"maxpool needs extent >= 2 along axis {axis}, got shape {x.shape}",
            details={"shape": list(x.shape), "axis": axis},
        )
    return MaxPool.apply(x, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def elu(x: Tensor) -> Tensor:
    return ELU.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def dropout(x: Tensor, p: float, mode: Mode, rng: Optional[RngState] = None) -> Tensor:
    """Inverted dropout; в режиме eval возвращает вход без изменений."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    _check_mode(mode)
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout requires an RngState")
    keep = rng.uniform(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(mask, dtype=x.dtype))


def _check_odd(kappa: int) -> None:
    if kappa % 2 == 0:
        raise ConfigurationError(
            f"same padding requires an odd kernel length, got {kappa}",
            details={"kernel_len": kappa},
        )


def _conv_mismatch(kind: str, x: Tensor, weight: Tensor) -> DimensionError:
    return DimensionError(f"{kind} conv shape mismatch: x {x.shape}, w {weight.shape}")


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1-D свёртка: x [B, k_in, L], w [k_out, k_in, κ] -> [B, k_out, L]."""
    _check_odd(weight.shape[-1])
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise _conv_mismatch("conv1d", x, weight)
    return TimeConv.apply(x, weight, bias)


def conv_temporal(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Временная свёртка ядром (1, κ).

    x [B, k_in, c, L], w [k_out, k_in, 1, κ] -> [B, k_out, c, L].
    """
    _check_odd(weight.shape[-1])
    if (
        x.ndim != 4
        or weight.ndim != 4
        or weight.shape[2] != 1
        or x.shape[1] != weight.shape[1]
    ):
        raise _conv_mismatch("temporal", x, weight)
    k_out, k_in, _, kappa = weight.shape
    return TimeConv.apply(x, reshape(weight, (k_out, k_in, kappa)), bias)


def conv_spatial(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Пространственная свёртка ядром (c, 1): [B, k_in, c, L] -> [B, k_out, 1, L]."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[-1] != 1:
        raise _conv_mismatch("spatial", x, weight)
    if weight.shape[2] != x.shape[2]:
        raise ConfigurationError(
            f"spatial kernel height {weight.shape[2]} != channel count {x.shape[2]}",
            details={"kernel_height": weight.shape[2], "channels": x.shape[2]},
        )
    if weight.shape[1] != x.shape[1]:
        raise _conv_mismatch("spatial", x, weight)
    return SpatialConv.apply(x, weight, bias)


def weight_norm(direction: Tensor, gain: Tensor) -> Tensor:
    """w = g · v / ||v||₂, норма по всем осям, кроме выходной."""
    axes = tuple(range(1, direction.ndim))
    norm = sqrt(sum(direction * direction, axis=axes, keepdims=True))
    scale = reshape(gain, (gain.shape[0],) + (1,) * len(axes))
    return direction * (scale / norm)


class BatchNormState:
    """Скользящие статистики батч-нормализации."""

    def __init__(
        self,
        features: int,
        momentum: float = 0.1,
        eps: float = 1e-5,
        dtype: Any = np.float32,
    ):
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError(
                f"batchnorm momentum must be in (0, 1), got {momentum}"
            )
        if eps <= 0:
            raise ConfigurationError(f"batchnorm eps must be positive, got {eps}")
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        dtype = self.running_mean.dtype
        self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(dtype)
        self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(dtype)

    def copy(self) -> "BatchNormState":
        clone = BatchNormState(
            self.running_mean.shape[0], self.momentum, self.eps, self.running_mean.dtype
        )
        clone.running_mean = self.running_mean.copy()
        clone.running_var = self.running_var.copy()
        return clone


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: Mode,
) -> Tensor:
    """Нормализация по оси признаков 1, статистики по всем остальным осям.

    В train скользящая дисперсия обновляется несмещённой оценкой батча.
    """
    _check_mode(mode)
    features = x.shape[1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise DimensionError(
            f"batchnorm affine shape {gamma.shape} does not match {features} features"
        )
    axes = tuple(a for a in range(x.ndim) if a != 1)
    broadcast = (1, features) + (1,) * (x.ndim - 2)
    eps = x.dtype.type(state.eps)

    if mode == "train":
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=axes, keepdims=True)
        count = x.size // features
        unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
        state.update(mu.data.reshape(-1), unbiased)
        normalized = centered / sqrt(var + eps)
    else:
        shift = Tensor(state.running_mean.reshape(broadcast), dtype=x.dtype)
        std = np.sqrt(state.running_var + eps).reshape(broadcast)
        scale = Tensor(std, dtype=x.dtype)
        normalized = (x - shift) / scale

    return normalized * reshape(gamma, broadcast) + reshape(beta, broadcast)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Нормализация по последней оси."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layernorm affine shape {gamma.shape} "
            f"does not match last axis of {x.shape}"
        )
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + x.dtype.type(eps)) * gamma + beta
