"""Pydantic-схемы конфигураций, отчётов и манифестов."""

from deformer.schemas.config import (
    ModelConfig,
    RunConfig,
    Signature,
    SyntheticSpec,
    TrainConfig,
    odd_kernel_length,
)
from deformer.schemas.reports import MetricsReport, RunManifest, ShapeAudit

__all__ = [
    "MetricsReport",
    "ModelConfig",
    "RunConfig",
    "RunManifest",
    "ShapeAudit",
    "Signature",
    "SyntheticSpec",
    "TrainConfig",
    "odd_kernel_length",
]
