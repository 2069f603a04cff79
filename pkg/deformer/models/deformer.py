"""Прямой проход EEG-Deformer: энкодер, HCT-блоки, плотная очистка информации."""

import math
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Union

import numpy as np

from deformer.core.exceptions import CheckpointError, ConfigurationError, DimensionError
from deformer.core.logging import LoggerMixin
from deformer.models.shapes import (
    buffer_shapes,
    contributing_blocks,
    parameter_shapes,
    shape_audit,
)
from deformer.schemas.config import ModelConfig
from deformer.tensor import ops
from deformer.tensor.engine import Tensor
from deformer.tensor.ops import BatchNormState, Mode
from deformer.tensor.rng import RngState

IpKind = Literal["power", "mean", "std"]


@dataclass
class DeformerParams:
    """Реестр параметров (имя -> тензор) и состояния батч-нормализаций."""

    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def affine(self, layer: str) -> tuple[Tensor, Tensor]:
        """Пара (weight, bias) слоя."""
        return self.tensors[f"{layer}.weight"], self.tensors[f"{layer}.bias"]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, state in self.bn.items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def copy(self) -> "DeformerParams":
        return DeformerParams(
            tensors={
                name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                for name, t in self.tensors.items()
            },
            bn={name: state.copy() for name, state in self.bn.items()},
        )

    def audit(self, config: ModelConfig) -> list[str]:
        """Расхождения форм с реестром, выведенным из конфигурации."""
        expected = parameter_shapes(config)
        problems = [
            f"{name}: expected {shape}, found "
            f"{self.tensors[name].shape if name in self.tensors else 'missing'}"
            for name, shape in expected.items()
            if name not in self.tensors or self.tensors[name].shape != shape
        ]
        extra = [name for name in self.tensors if name not in expected]
        problems += [f"{name}: unexpected" for name in extra]
        return problems


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    # свёртки хранятся как [out, in, ...], линейные слои как [in, out]
    if name.endswith(("temporal.weight", "ftl.conv.weight", "spatial.weight_v")):
        return math.prod(shape[1:])
    return shape[0]


def init_params(config: ModelConfig, rng: RngState) -> DeformerParams:
    """Инициализация U(±1/√fan_in); у каждого параметра свой поток rng."""
    dtype = config.dtype
    shapes = parameter_shapes(config)
    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        stream = rng.split(name)
        if name.endswith(("bn.weight", "norm.weight")):
            data = np.ones(shape)
        elif name.endswith(("bn.bias", "norm.bias")):
            data = np.zeros(shape)
        elif name == "encoder.pos_embedding":
            data = stream.normal(shape, std=config.pos_std)
        elif name == "encoder.spatial.weight_g":
            direction = tensors["encoder.spatial.weight_v"].data
            data = np.sqrt((direction.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
        elif name.endswith("bias"):
            weight_name = name[: -len("bias")] + "weight"
            if weight_name not in shapes:
                weight_name += "_v"
            bound = 1.0 / math.sqrt(_fan_in(weight_name, shapes[weight_name]))
            data = stream.uniform(shape, -bound, bound)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            data = stream.uniform(shape, -bound, bound)
        tensors[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)

    bn = {
        name.rsplit(".", 1)[0]: BatchNormState(
            shape[0], momentum=config.bn_momentum, eps=config.bn_eps, dtype=dtype
        )
        for name, shape in buffer_shapes(config).items()
        if name.endswith("running_mean")
    }
    return DeformerParams(tensors=tensors, bn=bn)


@dataclass
class BlockTrace:
    f_in: Optional[Tensor] = None
    q: Optional[Tensor] = None
    f_msa: Optional[Tensor] = None
    f_cg: Optional[Tensor] = None
    f_fg: Optional[Tensor] = None
    f_out: Optional[Tensor] = None
    ip: Optional[Tensor] = None


@dataclass
class ForwardTrace:
    """Промежуточные тензоры одного прямого прохода."""

    encoder: dict[str, Tensor] = field(default_factory=dict)
    blocks: list[BlockTrace] = field(default_factory=list)
    embedding: Optional[Tensor] = None
    logits: Optional[Tensor] = None

    def shape_table(self) -> dict[str, tuple[int, ...]]:
        table = {name: t.shape[1:] for name, t in self.encoder.items()}
        for i, block in enumerate(self.blocks):
            for label, tensor in (
                ("input", block.f_in),
                ("q", block.q),
                ("msa", block.f_msa),
                ("coarse", block.f_cg),
                ("fine", block.f_fg),
                ("output", block.f_out),
                ("ip", block.ip),
            ):
                if tensor is not None:
                    table[f"blocks.{i}.{label}"] = tensor.shape[1:]
        if self.embedding is not None:
            table["embedding"] = self.embedding.shape[1:]
        if self.logits is not None:
            table["logits"] = self.logits.shape[1:]
        return table


def shallow_encode(
    x: Tensor,
    params: DeformerParams,
    config: ModelConfig,
    mode: Mode,
    trace: Optional[ForwardTrace] = None,
) -> Tensor:
    """X [B, c, l] -> токены F [B, k, l/2]."""
    if x.ndim != 3 or x.shape[1:] != (config.channels, config.segment_len):
        raise DimensionError(
            f"input shape {x.shape} does not match "
            f"(batch, {config.channels}, {config.segment_len})",
            details={"shape": list(x.shape)},
        )
    batch = x.shape[0]
    h = ops.reshape(x, (batch, 1, config.channels, config.segment_len))
    h = ops.conv_temporal(h, *params.affine("encoder.temporal"))
    spatial = ops.weight_norm(
        params["encoder.spatial.weight_v"], params["encoder.spatial.weight_g"]
    )
    h_spatial = ops.conv_spatial(h, spatial, params["encoder.spatial.bias"])
    h_bn = ops.batchnorm(
        h_spatial, *params.affine("encoder.bn"), params.bn["encoder.bn"], mode
    )
    pooled = ops.maxpool(ops.elu(h_bn), axis=-1)
    tokens = ops.reshape(pooled, (batch, config.kernels, config.lengths[0]))
    tokens = tokens + params["encoder.pos_embedding"]
    if trace is not None:
        trace.encoder.update(
            {
                "input": x,
                "encoder.temporal": h,
                "encoder.spatial": h_spatial,
                "encoder.pool": pooled,
                "tokens": tokens,
            }
        )
    return tokens


def project_qkv(
    f: Tensor, w_qkv: Tensor, n_head: int, head_dim: int
) -> tuple[Tensor, Tensor, Tensor]:
    """MaxPool по времени и одна общая проекция; токены являются строками ядер.

    Возвращает Q, K, V формы [B, n_head, k, d_attn].
    """
    pooled = ops.maxpool(f, axis=-1)
    batch, kernels = f.shape[0], f.shape[1]
    qkv = ops.matmul(pooled, w_qkv)
    qkv = ops.reshape(qkv, (batch, kernels, 3, n_head, head_dim))
    qkv = ops.permute(qkv, (2, 0, 3, 1, 4))
    return qkv[0], qkv[1], qkv[2]


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Softmax(QKᵀ/√d)V по каждой голове; матрица внимания k×k."""
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise DimensionError(
            f"attention shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}"
        )
    d = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ops.matmul(q, ops.permute(k, axes)) / q.dtype.type(math.sqrt(d))
    return ops.matmul(ops.softmax(scores, axis=-1), v)


def msa(
    f: Tensor,
    params: DeformerParams,
    prefix: str,
    config: ModelConfig,
    block_trace: Optional[BlockTrace] = None,
) -> Tensor:
    """Многоголовое внимание с выходной проекцией HD -> L/2."""
    w_qkv = params[f"{prefix}.qkv.weight"]
    q, k, v = project_qkv(f, w_qkv, config.n_head, config.d_attn)
    heads = attention(q, k, v)
    batch, kernels = f.shape[0], f.shape[1]
    inner = config.n_head * config.d_attn
    merged = ops.reshape(ops.permute(heads, (0, 2, 1, 3)), (batch, kernels, inner))
    out = ops.linear(merged, *params.affine(f"{prefix}.attn_out"))
    if block_trace is not None:
        block_trace.q = q
        block_trace.f_msa = out
    return out


def coarse_branch(
    f: Tensor,
    params: DeformerParams,
    prefix: str,
    config: ModelConfig,
    block_trace: Optional[BlockTrace] = None,
) -> Tensor:
    """F_cg = FFN(LN(MSA(F) + MaxPool(F)))."""
    residual = msa(f, params, prefix, config, block_trace) + ops.maxpool(f, axis=-1)
    normed = ops.layernorm(residual, *params.affine(f"{prefix}.norm"), config.ln_eps)
    hidden = ops.gelu(ops.linear(normed, *params.affine(f"{prefix}.ffn.0")))
    return ops.linear(hidden, *params.affine(f"{prefix}.ffn.1"))


def fine_branch(
    f: Tensor,
    params: DeformerParams,
    prefix: str,
    config: ModelConfig,
    mode: Mode,
    rng: Optional[RngState] = None,
) -> Tensor:
    """F_fg = MaxPool(ELU(BN(Conv1d(Dropout(F)))))."""
    h = ops.dropout(f, config.dropout_p, mode, rng)
    h = ops.conv1d_same(h, *params.affine(f"{prefix}.ftl.conv"))
    h = ops.batchnorm(
        h, *params.affine(f"{prefix}.ftl.bn"), params.bn[f"{prefix}.ftl.bn"], mode
    )
    return ops.maxpool(ops.elu(h), axis=-1)


def hct_forward(
    f: Tensor,
    params: DeformerParams,
    index: int,
    config: ModelConfig,
    mode: Mode,
    rng: Optional[RngState] = None,
    block_trace: Optional[BlockTrace] = None,
) -> tuple[Tensor, Optional[Tensor], Tensor]:
    """Один HCT-блок: (F_{i+1}, F_fg, F_cg); без FTL F_{i+1} = F_cg и F_fg = None."""
    prefix = f"blocks.{index}"
    f_cg = coarse_branch(f, params, prefix, config, block_trace)
    f_fg = None
    if config.ftl_enabled:
        f_fg = fine_branch(f, params, prefix, config, mode, rng)
    f_next = f_cg + f_fg if f_fg is not None else f_cg
    if block_trace is not None:
        block_trace.f_in = f
        block_trace.f_cg = f_cg
        block_trace.f_fg = f_fg
        block_trace.f_out = f_next
    return f_next, f_fg, f_cg


def ip_unit(f_src: Tensor, mode: IpKind = "power", eps: float = 1e-8) -> Tensor:
    """Очистка информации по последней оси: [B, k, L] -> [B, k].

    power: log(mean(f²) + eps); mean: mean(f); std: sqrt(var(f) + eps).
    """
    eps_t = f_src.dtype.type(eps)
    if mode == "power":
        return ops.log(ops.mean(f_src * f_src, axis=-1) + eps_t)
    if mode == "mean":
        return ops.mean(f_src, axis=-1)
    if mode == "std":
        centered = f_src - ops.mean(f_src, axis=-1, keepdims=True)
        return ops.sqrt(ops.mean(centered * centered, axis=-1) + eps_t)
    raise ConfigurationError(f"unknown IP mode {mode!r}")


def _as_batch(x: Union[Tensor, np.ndarray], config: ModelConfig) -> Tensor:
    tensor = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=config.dtype))
    if tensor.dtype != config.dtype:
        data = tensor.data.astype(config.dtype)
        tensor = Tensor(data, requires_grad=tensor.requires_grad)
    if tensor.ndim == 2:
        tensor = ops.reshape(tensor, (1,) + tensor.shape)
    if tensor.ndim != 3 or tensor.shape[1:] != (config.channels, config.segment_len):
        raise DimensionError(
            f"input shape {tensor.shape} does not match geometry "
            f"(c={config.channels}, l={config.segment_len})",
            details={"shape": list(tensor.shape)},
        )
    return tensor


def deformer_forward(
    x: Union[Tensor, np.ndarray],
    params: DeformerParams,
    config: ModelConfig,
    mode: Mode = "eval",
    rng: Optional[RngState] = None,
) -> tuple[Tensor, ForwardTrace]:
    """Полный проход: логиты [B, n_classes] и трасса промежуточных тензоров."""
    x = _as_batch(x, config)
    batch = x.shape[0]
    trace = ForwardTrace()

    f = shallow_encode(x, params, config, mode, trace)
    contributing = set(contributing_blocks(config))
    source_kind = config.effective_ip_source
    purified = []
    for i in range(config.n_hct):
        block_trace = BlockTrace()
        trace.blocks.append(block_trace)
        f_next, f_fg, f_cg = hct_forward(f, params, i, config, mode, rng, block_trace)
        if i in contributing:
            source = {"fine": f_fg, "coarse": f_cg, "fused": f_next}[source_kind]
            assert source is not None
            if config.ip_mode == "none":
                item = ops.reshape(source, (batch, -1))
            else:
                item = ip_unit(source, config.ip_mode, config.ip_eps)
            block_trace.ip = item
            purified.append(item)
        f = f_next

    flat = ops.reshape(f, (batch, -1))
    embedding = ops.concat([flat, *purified], axis=1) if purified else flat
    logits = ops.linear(embedding, *params.affine("classifier"))
    trace.embedding, trace.logits = embedding, logits

    assert (
        trace.shape_table() == shape_audit(config).as_dict()
    ), "forward shapes diverge from shape_audit"
    return logits, trace


class EEGDeformer(LoggerMixin):
    """Модель: конфигурация, параметры и поток dropout."""

    def __init__(
        self,
        config: ModelConfig,
        seed: int = 0,
        params: Optional[DeformerParams] = None,
    ):
        root = RngState(seed)
        self.config = config
        self.seed = seed
        if params is None:
            params = init_params(config, root.split("init"))
        self.params = params
        self.dropout_rng = root.split("dropout")
        problems = self.params.audit(config)
        if problems:
            raise CheckpointError(
                f"Parameter registry does not match config: {problems[0]}",
                details={"problems": problems},
            )
        self.logger.debug(
            f"Model ready: {self.parameter_total()} parameters",
            extra={"seed": seed, "tensors": len(self.params.tensors)},
        )

    def __call__(
        self, x: Union[Tensor, np.ndarray], mode: Mode = "eval"
    ) -> tuple[Tensor, ForwardTrace]:
        return self.forward(x, mode)

    def forward(
        self, x: Union[Tensor, np.ndarray], mode: Mode = "eval"
    ) -> tuple[Tensor, ForwardTrace]:
        return deformer_forward(x, self.params, self.config, mode, self.dropout_rng)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params.tensors

    def zero_grad(self) -> None:
        for tensor in self.params.tensors.values():
            tensor.zero_grad()

    def parameter_total(self) -> int:
        return sum(t.size for t in self.params.tensors.values())

    def predict_logits(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Логиты в режиме eval, батчами; статистики BN не меняются."""
        chunks = [
            self.forward(x[start : start + batch_size], "eval")[0].data
            for start in range(0, len(x), batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def clone(self) -> "EEGDeformer":
        twin = EEGDeformer(self.config, seed=self.seed, params=self.params.copy())
        twin.dropout_rng = self.dropout_rng.copy()
        return twin

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Копии параметров и буферов BN."""
        params = {name: t.data.copy() for name, t in self.params.tensors.items()}
        buffers = {name: array.copy() for name, array in self.params.buffers().items()}
        return params, buffers

    def load_arrays(
        self, params: Mapping[str, np.ndarray], buffers: Mapping[str, np.ndarray]
    ) -> None:
        """Загрузка массивов с проверкой имён и форм по реестру конфигурации."""
        expected = {**parameter_shapes(self.config), **buffer_shapes(self.config)}
        provided = {**params, **buffers}
        mismatches = [
            {"name": name, "expected": list(shape), "found": list(provided[name].shape)}
            for name, shape in expected.items()
            if name in provided and tuple(provided[name].shape) != shape
        ]
        missing = [name for name in expected if name not in provided]
        unexpected = [name for name in provided if name not in expected]
        if mismatches or missing or unexpected:
            if mismatches:
                head = mismatches[0]
                first = (
                    f"{head['name']} expected {tuple(head['expected'])}, "
                    f"found {tuple(head['found'])}"
                )
            elif missing:
                first = f"missing {missing[0]}"
            else:
                first = f"unexpected {unexpected[0]}"
            raise CheckpointError(
                f"Checkpoint does not match model config: {first}",
                details={
                    "mismatches": mismatches,
                    "missing": missing,
                    "unexpected": unexpected,
                },
            )
        dtype = self.config.dtype
        for name, tensor in self.params.tensors.items():
            tensor.data = np.array(params[name], dtype=dtype)
            tensor.zero_grad()
        for name, state in self.params.bn.items():
            state.running_mean = np.array(buffers[f"{name}.running_mean"], dtype=dtype)
            state.running_var = np.array(buffers[f"{name}.running_var"], dtype=dtype)
        self.logger.info(
            f"Loaded {len(params)} parameter tensors ({self.parameter_total()} values) "
            f"and {len(buffers)} buffers",
            extra={"tensors": len(params), "buffers": len(buffers)},
        )
