"""Модель EEG-Deformer."""

from deformer.models.deformer import (
    DeformerParams,
    EEGDeformer,
    ForwardTrace,
    deformer_forward,
)
from deformer.models.shapes import macs_estimate, param_count, shape_audit

__all__ = [
    "DeformerParams",
    "EEGDeformer",
    "ForwardTrace",
    "deformer_forward",
    "macs_estimate",
    "param_count",
    "shape_audit",
]
