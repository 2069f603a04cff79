"""Схемы конфигурации модели, обучения и синтетических данных."""

import math
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from deformer.core.exceptions import ConfigurationError

IpMode = Literal["power", "mean", "std", "none"]
IpSource = Literal["fine", "coarse", "fused"]
Precision = Literal["float32", "float64"]


def odd_kernel_length(sampling_rate: float) -> int:
    """Длина ядра floor(0.1·fs), увеличенная до нечётной."""
    if sampling_rate <= 0:
        raise ConfigurationError(
            f"sampling rate must be positive, got {sampling_rate}",
            details={"sampling_rate": sampling_rate},
        )
    kappa = math.floor(sampling_rate / 10)
    return kappa + 1 if kappa % 2 == 0 else kappa


def pooled_lengths(segment_len: int, n_hct: int) -> list[int]:
    """Цепочка длин: токены после энкодера, затем выход каждого HCT-блока."""
    lengths = [segment_len // 2]
    for _ in range(n_hct):
        lengths.append(lengths[-1] // 2)
    return lengths


class ModelConfig(BaseModel):
    """Полное описание архитектуры."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    channels: int = Field(gt=0, description="Число каналов ЭЭГ, c")
    segment_len: int = Field(ge=2, description="Длина сегмента в отсчётах, l")
    sampling_rate: float = Field(gt=0, description="Частота дискретизации, Гц")
    kernels: int = Field(default=64, gt=0, description="Число CNN-ядер, k")
    n_head: int = Field(default=16, gt=0)
    head_dim: Optional[int] = Field(
        default=None, gt=0, description="d_attn; по умолчанию n_head"
    )
    n_hct: int = Field(default=4, ge=1, description="Число HCT-блоков")
    ffn_expansion: float = Field(default=2.0, gt=0)
    dropout_p: float = Field(default=0.5, ge=0, lt=1)
    n_classes: int = Field(default=2, ge=2)

    # Абляции
    ftl_enabled: bool = True
    dense_enabled: bool = True
    ip_mode: IpMode = "power"
    ip_source: IpSource = "fine"
    ip_removed: tuple[int, ...] = Field(
        default=(), description="Номера HCT-блоков, чьи IP-выходы не входят в эмбеддинг"
    )

    ip_eps: float = Field(default=1e-8, gt=0)
    pos_std: float = Field(default=0.02, ge=0)
    bn_momentum: float = Field(default=0.1, gt=0, lt=1)
    bn_eps: float = Field(default=1e-5, gt=0)
    ln_eps: float = Field(default=1e-5, gt=0)
    precision: Precision = "float32"
    strict_divisibility: bool = False

    @model_validator(mode="after")
    def check_geometry(self) -> "ModelConfig":
        violations = geometry_violations(self)
        if violations:
            raise ValueError("; ".join(violations))
        return self

    @property
    def d_attn(self) -> int:
        return self.head_dim if self.head_dim is not None else self.n_head

    @property
    def kernel_len(self) -> int:
        return odd_kernel_length(self.sampling_rate)

    @property
    def lengths(self) -> list[int]:
        return pooled_lengths(self.segment_len, self.n_hct)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def ffn_hidden(self, length: int) -> int:
        return max(1, int(round(self.ffn_expansion * length)))

    @property
    def effective_ip_source(self) -> IpSource:
        """Без FTL ветки F_fg нет, источник fine заменяется выходом блока."""
        if self.ip_source == "fine" and not self.ftl_enabled:
            return "fused"
        return self.ip_source

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ConfigurationError(
                f"Unknown preset {name!r}", details={"available": sorted(PRESETS)}
            ) from None
        return cls(**{**base, **overrides})


def geometry_violations(config: ModelConfig) -> list[str]:
    """Нарушенные ограничения геометрии (пустой список, если всё корректно)."""
    violations = []
    if config.segment_len < 2:
        violations.append(
            f"segment_len {config.segment_len} < 2: encoder pooling needs >= 2"
        )
    lengths = pooled_lengths(config.segment_len, config.n_hct)
    for i, length in enumerate(lengths[:-1], start=1):
        if length < 2:
            violations.append(
                f"block {i} input length {length} < 2: pooling chain "
                f"{config.segment_len}->{'->'.join(map(str, lengths))} collapses"
            )
            break
    outside = [i for i in config.ip_removed if not 0 <= i < config.n_hct]
    if outside:
        violations.append(f"ip_removed: blocks {outside} outside [0, {config.n_hct})")
    if len(set(config.ip_removed)) != len(config.ip_removed):
        violations.append(f"ip_removed: repeated blocks in {list(config.ip_removed)}")
    divisor = 2 ** (config.n_hct + 1)
    if config.strict_divisibility and config.segment_len % divisor:
        violations.append(
            f"segment_len {config.segment_len} is not divisible "
            f"by 2^(n_hct+1) = {divisor}"
        )
    return violations


PRESETS: dict[str, dict[str, Any]] = {
    "dataset-i": dict(
        channels=28, segment_len=800, sampling_rate=200, n_head=32, dropout_p=0.5
    ),
    "dataset-ii": dict(
        channels=32, segment_len=384, sampling_rate=128, n_head=16, dropout_p=0.5
    ),
    "dataset-iii": dict(
        channels=19, segment_len=2000, sampling_rate=500, n_head=16, dropout_p=0.25
    ),
    "toy": dict(
        channels=4,
        segment_len=64,
        sampling_rate=64,
        kernels=8,
        n_head=4,
        n_hct=2,
        dropout_p=0.5,
    ),
}


class TrainConfig(BaseModel):
    """Гиперпараметры оптимизации."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr0: float = Field(default=1e-3, ge=0)
    weight_decay: float = Field(default=1e-5, ge=0)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    seed: int = Field(default=0, ge=0)
    dropout_p: Optional[float] = Field(
        default=None, ge=0, lt=1, description="Переопределяет model.dropout_p"
    )
    lr_min: float = Field(default=0.0, ge=0)
    val_fraction: float = Field(default=0.2, gt=0, lt=1)
    per_subject_split: bool = False
    sample_std: bool = False
    workers: Optional[int] = Field(
        default=None,
        ge=1,
        description="Процессы для фолдов LOSO; по умолчанию settings.workers",
    )

    @field_validator("betas")
    @classmethod
    def check_betas(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= beta < 1.0 for beta in v):
            raise ValueError(f"betas must lie in [0, 1), got {v}")
        return v


class Signature(BaseModel):
    """Узкополосная синусоида класса на заданных каналах."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    channels: list[int] = Field(min_length=1)
    center_hz: float = Field(gt=0)
    width_hz: float = Field(default=2.0, ge=0)
    amplitude: float = Field(default=1.0, ge=0)


def _default_signatures() -> list[list[Signature]]:
    alpha = Signature(channels=[2, 5], center_hz=10.0, width_hz=2.0, amplitude=1.0)
    return [[], [alpha]]


class SyntheticSpec(BaseModel):
    """Параметры генератора синтетической ЭЭГ."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_subjects: int = Field(default=10, ge=1)
    trials_per_class: int = Field(default=40, ge=1)
    channels: int = Field(default=8, gt=0)
    segment_len: int = Field(default=256, ge=2)
    sampling_rate: float = Field(default=128.0, gt=0)
    n_classes: int = Field(default=2, ge=2)
    signatures: list[list[Signature]] = Field(default_factory=_default_signatures)
    noise_exponent: float = Field(default=1.0, ge=0, description="α в 1/f^α")
    noise_amplitude: float = Field(default=1.0, ge=0)
    amplitude_jitter: float = Field(default=0.2, ge=0, lt=1)
    trial_len: Optional[int] = Field(
        default=None, description="Длина испытания; None: сразу сегменты"
    )
    overlap: float = Field(default=0.5, ge=0, lt=1)
    channel_names: Optional[list[str]] = None

    @model_validator(mode="after")
    def check_consistency(self) -> "SyntheticSpec":
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def violations(self) -> list[str]:
        problems = []
        if len(self.signatures) != self.n_classes:
            problems.append(
                f"signatures: expected {self.n_classes} class entries, "
                f"got {len(self.signatures)}"
            )
        nyquist = self.sampling_rate / 2
        for cls_idx, entries in enumerate(self.signatures):
            for j, sig in enumerate(entries):
                path = f"signatures[{cls_idx}][{j}]"
                if sig.center_hz + sig.width_hz / 2 >= nyquist:
                    problems.append(
                        f"{path}.center_hz: band {sig.center_hz}±{sig.width_hz / 2} Hz "
                        f"reaches Nyquist {nyquist} Hz"
                    )
                if sig.center_hz - sig.width_hz / 2 <= 0:
                    problems.append(f"{path}.width_hz: band extends below 0 Hz")
                bad = [ch for ch in sig.channels if not 0 <= ch < self.channels]
                if bad:
                    problems.append(
                        f"{path}.channels: indices {bad} "
                        f"out of range [0, {self.channels})"
                    )
        if self.trial_len is not None and self.trial_len < self.segment_len:
            problems.append(
                f"trial_len: {self.trial_len} "
                f"shorter than segment_len {self.segment_len}"
            )
        if self.channel_names is not None and len(self.channel_names) != self.channels:
            problems.append(
                f"channel_names: expected {self.channels} names, "
                f"got {len(self.channel_names)}"
            )
        return problems

    def resolved_channel_names(self) -> list[str]:
        return self.channel_names or [f"Ch{i + 1}" for i in range(self.channels)]

    def signature_channels(self) -> list[int]:
        signatures = [sig for entries in self.signatures for sig in entries]
        return sorted({ch for sig in signatures for ch in sig.channels})


class RunConfig(BaseModel):
    """Разрешённая конфигурация запуска: таблицы [model], [train], [data]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: Optional[SyntheticSpec] = None
