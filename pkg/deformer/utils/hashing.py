"""Хеши содержимого для манифестов запусков и проверки целостности."""

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

_CHUNK = 1 << 20


def sha256_bytes(data: bytes) -> str:
    """Хеш SHA-256 байтовой строки."""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    """Хеш SHA-256 файла, читается блоками."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """Хеш набора массивов (имя, dtype, форма, байты) в порядке сортировки имён."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name])
        header = json.dumps([name, array.dtype.str, list(array.shape)])
        digest.update(header.encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def canonical_json(payload: Any) -> str:
    """Детерминированная сериализация: сортированные ключи, фиксированные отступы."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
