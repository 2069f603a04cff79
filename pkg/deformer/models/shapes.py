"""Алгебра форм, число параметров и оценка MAC."""

import math
from collections import OrderedDict
from functools import lru_cache

from deformer.core.exceptions import ConfigurationError
from deformer.schemas.config import ModelConfig, geometry_violations, odd_kernel_length
from deformer.schemas.reports import ShapeAudit, ShapeRow

__all__ = [
    "buffer_shapes",
    "contributing_blocks",
    "embedding_length",
    "macs_breakdown",
    "macs_estimate",
    "odd_kernel_length",
    "param_count",
    "parameter_shapes",
    "shape_audit",
]


def _require_valid(config: ModelConfig) -> None:
    violations = geometry_violations(config)
    if violations:
        raise ConfigurationError(
            f"Invalid model geometry: {violations[0]}",
            details={"violations": violations},
        )


def contributing_blocks(config: ModelConfig) -> list[int]:
    """Блоки, чьи IP-выходы (или обходы без IP) входят в эмбеддинг.

    Блоки из ``ip_removed`` исключаются и в плотном, и в неплотном режиме.
    """
    if config.dense_enabled:
        blocks = list(range(config.n_hct))
    else:
        blocks = [] if config.ip_mode == "none" else [config.n_hct - 1]
    return [i for i in blocks if i not in config.ip_removed]


def _ip_len(config: ModelConfig, block: int) -> int:
    if config.ip_mode == "none":
        return config.kernels * config.lengths[block + 1]
    return config.kernels


def embedding_length(config: ModelConfig) -> int:
    flat = config.kernels * config.lengths[-1]
    return flat + sum(_ip_len(config, i) for i in contributing_blocks(config))


@lru_cache(maxsize=64)
def shape_audit(config: ModelConfig) -> ShapeAudit:
    """Формы всех промежуточных тензоров одного сэмпла (без оси батча)."""
    _require_valid(config)
    c, seg_len, k = config.channels, config.segment_len, config.kernels
    heads, d = config.n_head, config.d_attn
    lengths = config.lengths

    rows = [
        ShapeRow(name="input", shape=(c, seg_len)),
        ShapeRow(name="encoder.temporal", shape=(k, c, seg_len)),
        ShapeRow(name="encoder.spatial", shape=(k, 1, seg_len)),
        ShapeRow(name="encoder.pool", shape=(k, 1, lengths[0])),
        ShapeRow(name="tokens", shape=(k, lengths[0])),
    ]
    contributing = set(contributing_blocks(config))
    for i in range(config.n_hct):
        prefix = f"blocks.{i}"
        length, half = lengths[i], lengths[i + 1]
        rows.append(ShapeRow(name=f"{prefix}.input", shape=(k, length)))
        rows.append(ShapeRow(name=f"{prefix}.q", shape=(heads, k, d)))
        rows.append(ShapeRow(name=f"{prefix}.msa", shape=(k, half)))
        rows.append(ShapeRow(name=f"{prefix}.coarse", shape=(k, half)))
        if config.ftl_enabled:
            rows.append(ShapeRow(name=f"{prefix}.fine", shape=(k, half)))
        rows.append(ShapeRow(name=f"{prefix}.output", shape=(k, half)))
        if i in contributing:
            rows.append(ShapeRow(name=f"{prefix}.ip", shape=(_ip_len(config, i),)))
    embedding = embedding_length(config)
    rows.append(ShapeRow(name="embedding", shape=(embedding,)))
    rows.append(ShapeRow(name="logits", shape=(config.n_classes,)))
    return ShapeAudit(
        rows=rows,
        kernel_len=config.kernel_len,
        lengths=[seg_len] + lengths,
        embedding_len=embedding,
    )


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Реестр обучаемых параметров: имя -> форма, только из конфигурации."""
    _require_valid(config)
    c, k, kappa = config.channels, config.kernels, config.kernel_len
    inner = config.n_head * config.d_attn
    lengths = config.lengths

    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    shapes["encoder.temporal.weight"] = (k, 1, 1, kappa)
    shapes["encoder.temporal.bias"] = (k,)
    shapes["encoder.spatial.weight_v"] = (k, k, c, 1)
    shapes["encoder.spatial.weight_g"] = (k,)
    shapes["encoder.spatial.bias"] = (k,)
    shapes["encoder.bn.weight"] = (k,)
    shapes["encoder.bn.bias"] = (k,)
    shapes["encoder.pos_embedding"] = (k, lengths[0])
    for i in range(config.n_hct):
        prefix = f"blocks.{i}"
        half = lengths[i + 1]
        hidden = config.ffn_hidden(half)
        shapes[f"{prefix}.qkv.weight"] = (half, 3 * inner)
        shapes[f"{prefix}.attn_out.weight"] = (inner, half)
        shapes[f"{prefix}.attn_out.bias"] = (half,)
        shapes[f"{prefix}.norm.weight"] = (half,)
        shapes[f"{prefix}.norm.bias"] = (half,)
        shapes[f"{prefix}.ffn.0.weight"] = (half, hidden)
        shapes[f"{prefix}.ffn.0.bias"] = (hidden,)
        shapes[f"{prefix}.ffn.1.weight"] = (hidden, half)
        shapes[f"{prefix}.ffn.1.bias"] = (half,)
        if config.ftl_enabled:
            shapes[f"{prefix}.ftl.conv.weight"] = (k, k, kappa)
            shapes[f"{prefix}.ftl.conv.bias"] = (k,)
            shapes[f"{prefix}.ftl.bn.weight"] = (k,)
            shapes[f"{prefix}.ftl.bn.bias"] = (k,)
    shapes["classifier.weight"] = (embedding_length(config), config.n_classes)
    shapes["classifier.bias"] = (config.n_classes,)
    return shapes


def buffer_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Скользящие статистики батч-нормализаций."""
    k = config.kernels
    names = ["encoder.bn"]
    if config.ftl_enabled:
        names += [f"blocks.{i}.ftl.bn" for i in range(config.n_hct)]
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    for name in names:
        shapes[f"{name}.running_mean"] = (k,)
        shapes[f"{name}.running_var"] = (k,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(math.prod(shape) for shape in parameter_shapes(config).values())


def macs_breakdown(config: ModelConfig) -> dict[str, int]:
    """MAC на один сэмпл по операциям.

    temporal conv k·c·l·κ; spatial conv k·k·c·l; на блок: QKV k·L'·3HD,
    QKᵀ и AV по H·k·k·D, выходная проекция k·HD·L', FFN 2·k·L'·hidden,
    FTL conv k·k·κ·L; классификатор E·n_classes. Нормализации и
    поэлементные операции не учитываются.
    """
    _require_valid(config)
    c, seg_len = config.channels, config.segment_len
    k, kappa = config.kernels, config.kernel_len
    heads, d = config.n_head, config.d_attn
    inner = heads * d
    lengths = config.lengths

    macs = {
        "encoder.temporal": k * c * seg_len * kappa,
        "encoder.spatial": k * k * c * seg_len,
    }
    for i in range(config.n_hct):
        prefix = f"blocks.{i}"
        length, half = lengths[i], lengths[i + 1]
        macs[f"{prefix}.qkv"] = k * half * 3 * inner
        macs[f"{prefix}.attention"] = 2 * heads * k * k * d
        macs[f"{prefix}.attn_out"] = k * inner * half
        macs[f"{prefix}.ffn"] = 2 * k * half * config.ffn_hidden(half)
        if config.ftl_enabled:
            macs[f"{prefix}.ftl"] = k * k * kappa * length
    macs["classifier"] = embedding_length(config) * config.n_classes
    return macs


def macs_estimate(config: ModelConfig) -> int:
    return sum(macs_breakdown(config).values())
