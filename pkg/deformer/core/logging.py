"""Настройка логирования."""

import logging
import sys
from typing import Optional

from deformer.core.config import settings

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logging(level: Optional[str] = None) -> None:
    """Настройка системы логирования.

    Консоль пишет в stderr, чтобы stdout оставался под вывод команд.
    Файловый вывод включается через ``DEFORMER_LOG_FILE``.
    """
    resolved = level or ("DEBUG" if settings.debug else settings.log_level)

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.log_file is not None:
        settings.log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            logging.FileHandler(settings.log_file, mode="a", encoding="utf-8")
        )

    logging.basicConfig(
        level=resolved,
        format=LOG_FORMAT,
        datefmt=DATE_FORMAT,
        handlers=handlers,
        force=True,
    )

    app_logger = logging.getLogger("deformer")
    app_logger.setLevel(resolved)
    app_logger.debug("Logging system initialized")


def get_logger(name: str) -> logging.Logger:
    """Получение логгера по имени."""
    return logging.getLogger(f"deformer.{name}")


class LoggerMixin:
    """Миксин для добавления логгера в классы."""

    @property
    def logger(self) -> logging.Logger:
        """Логгер для текущего класса."""
        return get_logger(self.__class__.__name__)
