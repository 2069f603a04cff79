"""Тензорный движок с обратным автодифференцированием."""

from deformer.tensor.engine import Function, Tensor
from deformer.tensor.rng import RngState

__all__ = ["Function", "Tensor", "RngState"]
