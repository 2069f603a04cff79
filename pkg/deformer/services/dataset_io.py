"""Бинарный формат датасета EEGD (little-endian).

Заголовок: magic ``EEGD``, версия формата (u16), c (u32), l (u32),
fs в мГц (u64), n_classes (u16), n_subjects (u32). Затем c имён каналов
(u16 длина + UTF-8). Для каждого субъекта: u16 длина id + байты, u32 число
сегментов, метки int32, отсчёты float32 в порядке [n, c, l].
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from deformer.core.exceptions import DomainError, FormatError
from deformer.core.logging import get_logger
from deformer.services.data import EEGDataset, SubjectData

logger = get_logger("dataset_io")

MAGIC = b"EEGD"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHIIQHI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def encode_dataset(dataset: EEGDataset) -> bytes:
    if not dataset.subjects:
        raise DomainError("cannot write a dataset without subjects")
    c, seg_len = dataset.geometry
    fs_mhz = int(round(dataset.sampling_rate * 1000))
    parts = [
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            c,
            seg_len,
            fs_mhz,
            dataset.n_classes,
            len(dataset.subjects),
        )
    ]
    for name in dataset.channel_names:
        raw = name.encode("utf-8")
        parts += [_U16.pack(len(raw)), raw]
    for subject in dataset.subjects:
        raw = subject.subject_id.encode("utf-8")
        parts += [_U16.pack(len(raw)), raw, _U32.pack(len(subject))]
        parts.append(subject.labels.astype("<i4").tobytes())
        parts.append(np.ascontiguousarray(subject.segments, dtype="<f4").tobytes())
    return b"".join(parts)


def write_dataset(dataset: EEGDataset, path: Union[str, Path]) -> Path:
    """Запись датасета; пустой список субъектов отклоняется до открытия файла."""
    payload = encode_dataset(dataset)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.info(
        f"Dataset written to {path}",
        extra={
            "path": str(path),
            "subjects": len(dataset.subjects),
            "bytes": len(payload),
        },
    )
    return path


class _Cursor:
    """Последовательное чтение буфера с контролем границ."""

    def __init__(self, data: bytes, path: Union[str, Path, None]):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise FormatError(
                f"truncated file: expected {size} bytes for {what}, "
                f"{len(self.data) - self.offset} left",
                offset=self.offset,
                path=self.path,
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))

    def text(self, what: str) -> str:
        (length,) = self.unpack(_U16, f"{what} length")
        start = self.offset
        raw = self.take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(
                f"{what} is not valid UTF-8", offset=start, path=self.path
            ) from None


def decode_dataset(data: bytes, path: Union[str, Path, None] = None) -> EEGDataset:
    cursor = _Cursor(data, path)
    header = cursor.unpack(_HEADER, "header")
    magic, version, c, seg_len, fs_mhz, n_classes, n_subjects = header
    if magic != MAGIC:
        raise FormatError(
            f"bad magic {magic!r}, expected {MAGIC!r}", offset=0, path=path
        )
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}",
            offset=4,
            path=path,
        )
    if c == 0 or seg_len == 0 or n_classes < 2:
        raise FormatError(
            f"invalid geometry c={c}, l={seg_len}, n_classes={n_classes}",
            offset=6,
            path=path,
        )

    channel_names = [cursor.text(f"channel name {i}") for i in range(c)]
    subjects = []
    for s in range(n_subjects):
        subject_id = cursor.text(f"subject {s} id")
        (count,) = cursor.unpack(_U32, f"subject {subject_id!r} segment count")
        labels_at = cursor.offset
        raw_labels = cursor.take(4 * count, "labels")
        labels = np.frombuffer(raw_labels, dtype="<i4").astype(np.int64)
        if count == 0 or labels.min() < 0 or labels.max() >= n_classes:
            raise FormatError(
                f"subject {subject_id!r}: empty or out-of-range labels",
                offset=labels_at,
                path=path,
            )
        raw = cursor.take(4 * count * c * seg_len, f"subject {subject_id!r} samples")
        samples = np.frombuffer(raw, dtype="<f4").reshape(count, c, seg_len)
        subjects.append(SubjectData(subject_id, samples.astype(np.float32), labels))
    if cursor.offset != len(data):
        raise FormatError(
            f"{len(data) - cursor.offset} trailing bytes after last subject",
            offset=cursor.offset,
            path=path,
        )
    return EEGDataset(
        subjects=subjects,
        sampling_rate=fs_mhz / 1000.0,
        n_classes=n_classes,
        channel_names=channel_names,
    )


def read_dataset(path: Union[str, Path]) -> EEGDataset:
    """Чтение датасета; при любом повреждении FormatError без частичного результата."""
    path = Path(path)
    dataset = decode_dataset(path.read_bytes(), path)
    logger.debug(f"Dataset read from {path}", extra={"subjects": len(dataset.subjects)})
    return dataset
