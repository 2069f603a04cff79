"""Загрузка конфигураций запусков: TOML, манифесты JSON, переопределения ``--set``."""

import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Union

from pydantic import BaseModel, ValidationError

from deformer.core.config import settings
from deformer.core.exceptions import ConfigurationError, UsageError
from deformer.schemas.config import PRESETS, RunConfig, SyntheticSpec
from deformer.schemas.reports import RunManifest

BUNDLED_CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def resolve_config_path(name: Union[str, Path]) -> Path:
    """Путь к файлу или имя встроенной конфигурации (``toy``, ``synthetic``)."""
    path = Path(name)
    if path.exists():
        return path
    bundled = BUNDLED_CONFIGS / f"{name}.toml"
    if bundled.exists():
        return bundled
    raise UsageError(
        f"Config not found: {name}",
        details={"bundled": sorted(p.stem for p in BUNDLED_CONFIGS.glob("*.toml"))},
    )


def read_document(path: Union[str, Path]) -> dict[str, Any]:
    """TOML-документ или конфигурация из манифеста запуска (``.json``)."""
    path = resolve_config_path(path)
    try:
        if path.suffix == ".json":
            text = path.read_text(encoding="utf-8")
            return dict(RunManifest.model_validate_json(text).config)
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid TOML: {exc}") from None
    except (ValidationError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{path}: not a run manifest: {exc}") from None


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(
    document: dict[str, Any], overrides: Iterable[str]
) -> dict[str, Any]:
    """``section.field=value``; значение разбирается как TOML, иначе строка."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(
                f"Override must look like section.field=value, got {item!r}"
            )
        *parents, leaf = key.strip().split(".")
        node = document
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise UsageError(f"Override {key!r}: {part!r} is not a table")
            node = child
        node[leaf] = _parse_value(raw.strip())
    return document


def validation_messages(exc: ValidationError, prefix: str = "") -> list[str]:
    """Ошибки pydantic в виде ``путь.к.полю: сообщение``."""
    messages = []
    for error in exc.errors():
        loc = ".".join(str(part) for part in (prefix, *error["loc"]) if part != "")
        messages.append(f"{loc or '<root>'}: {error['msg']}")
    return messages


def _validate(
    model: type[BaseModel], payload: Mapping[str, Any], prefix: str = ""
) -> Any:
    try:
        return model.model_validate(payload)
    except ValidationError as exc:
        messages = validation_messages(exc, prefix)
        raise ConfigurationError(
            f"Invalid configuration: {messages[0]}", details={"errors": messages}
        ) from None


def _expand_preset(table: dict[str, Any]) -> dict[str, Any]:
    name = table.pop("preset", None)
    if name is None:
        return table
    if name not in PRESETS:
        raise ConfigurationError(
            f"Invalid configuration: model.preset: unknown preset {name!r}",
            details={"available": sorted(PRESETS)},
        )
    return {**PRESETS[name], **table}


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    model_defaults: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Полная конфигурация запуска.

    ``model_defaults`` (обычно геометрия датасета) заполняет отсутствующие
    поля таблицы [model]. ``DEFORMER_SEED`` переопределяет ``train.seed``.
    """
    document = read_document(path) if path is not None else {}
    document = apply_overrides(document, overrides)
    model = _expand_preset(dict(document.get("model", {})))
    for key, value in (model_defaults or {}).items():
        model.setdefault(key, value)
    document["model"] = model
    if settings.seed is not None:
        document["train"] = {**document.get("train", {}), "seed": settings.seed}
    return _validate(RunConfig, document)


def load_synthetic_spec(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()
) -> SyntheticSpec:
    """Таблица [data] документа; без файла используется спецификация по умолчанию."""
    document = read_document(path) if path is not None else {}
    document = apply_overrides(document, overrides)
    return _validate(SyntheticSpec, document.get("data", {}), prefix="data")
