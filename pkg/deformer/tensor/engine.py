"""Тензор, узлы графа и обратный проход."""

from typing import Any, Optional, Sequence, Union

import numpy as np

from deformer.core.exceptions import ContractError

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

DEFAULT_DTYPE = np.float32


class Function:
    """Базовый класс дифференцируемой операции.

    Подкласс реализует ``forward`` над numpy-массивами входов и ``backward``,
    который по градиенту выхода возвращает градиенты входов (``None`` для
    входа без градиента). Нетензорные аргументы передаются ключевыми словами.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = any(t.requires_grad for t in inputs)
        node = fn if requires_grad else None
        return Tensor(out, requires_grad=requires_grad, node=node)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        """Сворачивание градиента обратно к форме до broadcasting."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """n-мерный массив, участвующий в записанном графе вычислений."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        node: Optional[Function] = None,
        dtype: Optional[Any] = None,
    ):
        if dtype is None:
            is_float = isinstance(data, np.ndarray) and np.issubdtype(
                data.dtype, np.floating
            )
            dtype = data.dtype if is_float else DEFAULT_DTYPE
        array = np.asarray(data, dtype=dtype)
        # ascontiguousarray поднимает 0-d до 1-d, поэтому копируем вручную
        if not array.flags.c_contiguous:
            array = array.copy(order="C")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node = node

    # Свойства

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad})"
        )

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # Обратный проход

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in tensor.node.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Накопление d(self)/d(leaf) в ``grad`` каждого листа с requires_grad."""
        if self.data.size != 1:
            raise ContractError(
                "backward() requires a scalar output",
                details={"shape": list(self.shape)},
            )
        if not self.requires_grad:
            raise ContractError(
                "backward() called on a tensor that does not require grad"
            )

        order = self._topological_order()
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for tensor in reversed(order):
            grad = pending.pop(id(tensor), None)
            if grad is None:
                continue
            if tensor.node is None:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                continue
            input_grads = tensor.node.backward(grad)
            for parent, parent_grad in zip(tensor.node.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    # Операторы

    def _lift(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=self.dtype)

    def __add__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.add(self, self._lift(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.add(self._lift(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.sub(self, self._lift(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.sub(self._lift(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.mul(self, self._lift(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.mul(self._lift(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.div(self, self._lift(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        from deformer.tensor import ops

        return ops.div(self._lift(other), self)

    def __neg__(self) -> "Tensor":
        from deformer.tensor import ops

        return ops.neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        from deformer.tensor import ops

        return ops.power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from deformer.tensor import ops

        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from deformer.tensor import ops

        return ops.getitem(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        from deformer.tensor import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, tuple(shape))

    def permute(self, *axes: int) -> "Tensor":
        from deformer.tensor import ops

        return ops.permute(self, tuple(axes))

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from deformer.tensor import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from deformer.tensor import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)
