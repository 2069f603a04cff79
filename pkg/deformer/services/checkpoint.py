"""Чекпоинты: каталог с манифестом ``manifest.json`` и блобом ``tensors.bin``.

Блоб состоит из подряд записанных little-endian массивов в порядке манифеста:
параметры (порядок реестра), буферы BN, моменты Adam.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Union

import numpy as np
from pydantic import ValidationError

from deformer.core.exceptions import CheckpointError, FormatError, IntegrityError
from deformer.core.logging import get_logger
from deformer.models.deformer import EEGDeformer
from deformer.models.shapes import buffer_shapes, parameter_shapes
from deformer.schemas.config import ModelConfig
from deformer.schemas.reports import CheckpointManifest, TensorEntry
from deformer.tensor.rng import RngState
from deformer.utils.hashing import canonical_json, sha256_bytes

if TYPE_CHECKING:
    from deformer.services.training import AdamState

logger = get_logger("checkpoint")

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"

_GROUPS = ("param", "buffer", "adam_m", "adam_v")


# Поля, которые влияют только на обучение и инициализацию
TRAINING_ONLY_FIELDS = frozenset({"dropout_p", "pos_std", "bn_momentum"})


def config_differences(saved: ModelConfig, current: ModelConfig) -> list[str]:
    """Поля, по которым конфигурация чекпоинта расходится с моделью."""
    left = saved.model_dump(exclude=set(TRAINING_ONLY_FIELDS))
    right = current.model_dump(exclude=set(TRAINING_ONLY_FIELDS))
    return [
        f"{name}={left[name]!r} in checkpoint vs {right[name]!r} in model"
        for name in left
        if left[name] != right[name]
    ]


@dataclass(eq=False)
class Checkpoint:
    """Снимок модели и оптимизатора на лучшей эпохе."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    epoch: int = 0
    best_val_acc: float = 0.0
    rng: RngState = field(default_factory=lambda: RngState(0))

    @classmethod
    def from_model(
        cls,
        model: EEGDeformer,
        optimizer: "AdamState | None" = None,
        epoch: int = 0,
        best_val_acc: float = 0.0,
    ) -> "Checkpoint":
        params, buffers = model.state_arrays()
        return cls(
            config=model.config,
            params=params,
            buffers=buffers,
            adam_m={k: v.copy() for k, v in optimizer.m.items()} if optimizer else {},
            adam_v={k: v.copy() for k, v in optimizer.v.items()} if optimizer else {},
            optimizer_step=optimizer.step if optimizer else 0,
            epoch=epoch,
            best_val_acc=best_val_acc,
            rng=model.dropout_rng.copy(),
        )

    def to_model(self, seed: int = 0) -> EEGDeformer:
        model = EEGDeformer(self.config, seed=seed)
        model.load_arrays(self.params, self.buffers)
        model.dropout_rng = self.rng.copy()
        return model

    def restore(self, model: EEGDeformer) -> EEGDeformer:
        """Копия ``model`` с весами чекпоинта; исходная модель не меняется.

        Помимо имён и форм тензоров сверяются поля конфигурации, меняющие
        прямой проход (``ip_mode``, ``ip_source``, ``sampling_rate`` и т. д.).
        """
        twin = model.clone()
        twin.load_arrays(self.params, self.buffers)
        differences = config_differences(self.config, model.config)
        if differences:
            raise CheckpointError(
                f"Checkpoint config differs from model: {differences[0]}",
                details={"differences": differences},
            )
        return twin

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            "param": self.params,
            "buffer": self.buffers,
            "adam_m": self.adam_m,
            "adam_v": self.adam_v,
        }

    def check_registry(self) -> None:
        """Каждое имя реестра встречается ровно один раз, формы совпадают."""
        expected = {**parameter_shapes(self.config), **buffer_shapes(self.config)}
        provided = {**self.params, **self.buffers}
        bad = [
            f"{name}: expected {shape}, found "
            f"{tuple(provided[name].shape) if name in provided else 'missing'}"
            for name, shape in expected.items()
            if name not in provided or tuple(provided[name].shape) != shape
        ]
        bad += [f"{name}: unexpected" for name in provided if name not in expected]
        if bad:
            raise CheckpointError(
                f"Checkpoint does not match its config: {bad[0]}",
                details={"problems": bad},
            )


def _encode(ckpt: Checkpoint) -> tuple[CheckpointManifest, bytes]:
    entries, chunks = [], []
    offset = 0
    order = list(parameter_shapes(ckpt.config)) + list(buffer_shapes(ckpt.config))
    for group, arrays in ckpt.groups().items():
        extra = sorted(n for n in arrays if n not in order)
        names = [n for n in order if n in arrays] + extra
        for name in names:
            array = np.asarray(arrays[name])
            little = array.dtype.newbyteorder("<")
            raw = np.ascontiguousarray(array, dtype=little).tobytes()
            entries.append(
                TensorEntry(
                    name=name,
                    group=group,
                    dtype=little.str,
                    shape=list(array.shape),
                    offset=offset,
                    nbytes=len(raw),
                )
            )
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = CheckpointManifest(
        format_version=CHECKPOINT_FORMAT_VERSION,
        config=ckpt.config.model_dump(mode="json"),
        epoch=ckpt.epoch,
        best_val_acc=ckpt.best_val_acc,
        optimizer_step=ckpt.optimizer_step,
        rng={"seed": ckpt.rng.seed, "counter": ckpt.rng.counter},
        blob_sha256=sha256_bytes(blob),
        blob_size=len(blob),
        tensors=entries,
    )
    return manifest, blob


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Запись в каталог ``path``; повторное сохранение даёт те же байты."""
    ckpt.check_registry()
    manifest, blob = _encode(ckpt)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(
        canonical_json(manifest.model_dump(mode="json")), encoding="utf-8"
    )
    logger.info(
        f"Checkpoint saved to {path}",
        extra={"path": str(path), "epoch": ckpt.epoch, "bytes": len(blob)},
    )
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    try:
        text = manifest_path.read_text(encoding="utf-8")
        manifest = CheckpointManifest.model_validate_json(text)
    except FileNotFoundError:
        raise FormatError("checkpoint manifest not found", path=manifest_path) from None
    except (ValidationError, json.JSONDecodeError) as exc:
        raise FormatError(
            f"invalid checkpoint manifest: {exc}", path=manifest_path
        ) from None
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint format version {manifest.format_version}",
            path=manifest_path,
        )

    blob_path = path / BLOB_NAME
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise FormatError("checkpoint tensor blob not found", path=blob_path) from None
    if len(blob) != manifest.blob_size:
        raise IntegrityError(
            f"blob size {len(blob)} does not match manifest ({manifest.blob_size})",
            details={"path": str(path)},
        )
    if sha256_bytes(blob) != manifest.blob_sha256:
        raise IntegrityError(
            "blob checksum does not match manifest", details={"path": str(path)}
        )

    try:
        config = ModelConfig.model_validate(manifest.config)
    except ValidationError as exc:
        raise FormatError(f"invalid config echo: {exc}", path=manifest_path) from None

    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for entry in manifest.tensors:
        if entry.group not in groups:
            raise IntegrityError(
                f"unknown tensor group {entry.group!r} for {entry.name}"
            )
        if entry.name in groups[entry.group]:
            raise IntegrityError(
                f"tensor {entry.name} listed twice in group {entry.group}"
            )
        dtype = np.dtype(entry.dtype)
        if entry.nbytes != math.prod(entry.shape) * dtype.itemsize:
            raise IntegrityError(
                f"tensor {entry.name}: {entry.nbytes} bytes for shape {entry.shape}",
                details={"name": entry.name},
            )
        if entry.offset + entry.nbytes > len(blob):
            raise IntegrityError(
                f"tensor {entry.name} extends past end of blob",
                details={"name": entry.name},
            )
        raw = blob[entry.offset : entry.offset + entry.nbytes]
        array = np.frombuffer(raw, dtype=dtype).reshape(entry.shape)
        groups[entry.group][entry.name] = array.astype(dtype.newbyteorder("="))

    ckpt = Checkpoint(
        config=config,
        params=groups["param"],
        buffers=groups["buffer"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        optimizer_step=manifest.optimizer_step,
        epoch=manifest.epoch,
        best_val_acc=manifest.best_val_acc,
        rng=RngState(seed=manifest.rng["seed"], counter=manifest.rng["counter"]),
    )
    ckpt.check_registry()
    return ckpt
