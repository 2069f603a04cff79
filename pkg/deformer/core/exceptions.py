"""Исключения и их обработка."""

import logging
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class AppException(Exception):
    """Базовое исключение приложения."""

    def __init__(
        self,
        message: str,
        exit_code: int = EXIT_FAILURE,
        details: Optional[Dict[str, Any]] = None,
    ):
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(AppException):
    """Некорректная конфигурация (модель, обучение, данные)."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, exit_code=EXIT_USAGE, details=details)


class UsageError(AppException):
    """Неверные аргументы командной строки."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, exit_code=EXIT_USAGE, details=details)


class DimensionError(AppException):
    """Несовпадение размерностей тензоров."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, details=details)


class DomainError(AppException):
    """Аргумент вне области определения."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, details=details)


class ContractError(AppException):
    """Нарушение контракта вызова."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, details=details)


class SubjectLookupError(AppException):
    """Субъект не найден в датасете."""

    def __init__(self, subject_id: str):
        super().__init__(
            message=f"Unknown subject: {subject_id!r}",
            details={"subject_id": subject_id},
        )


class FormatError(AppException):
    """Повреждённый или несовместимый файл."""

    def __init__(self, message: str, offset: Optional[int] = None, path: Any = None):
        details: Dict[str, Any] = {}
        if offset is not None:
            details["offset"] = offset
            message = f"{message} (at byte offset {offset})"
        if path is not None:
            details["path"] = str(path)
        super().__init__(message=message, details=details)


class CheckpointError(AppException):
    """Чекпоинт не подходит к конфигурации модели."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, details=details)


class IntegrityError(AppException):
    """Манифест и бинарный блоб не согласованы."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, details=details)


class GradientCheckError(AppException):
    """Аналитический градиент расходится с конечными разностями."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, details=details)


def handle_exception(exc: BaseException) -> int:
    """Логирование исключения и выбор кода возврата."""
    if isinstance(exc, AppException):
        logger.error(
            f"{type(exc).__name__}: {exc.message}", extra={"details": exc.details}
        )
        return exc.exit_code

    logger.exception("Unhandled exception occurred")
    return EXIT_FAILURE
