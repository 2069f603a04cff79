"""Настройки процесса."""

from pathlib import Path
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Настройки процесса, читаются из окружения (префикс DEFORMER_) и .env."""

    model_config = SettingsConfigDict(
        env_prefix="DEFORMER_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Основные настройки
    PROJECT_NAME: str = Field(default="EEG-Deformer", description="Название проекта")
    VERSION: str = Field(default="0.1.0", description="Версия пакета")

    # Отладка и логирование
    debug: bool = Field(default=False, description="Режим отладки")
    log_level: str = Field(default="INFO", description="Уровень логирования")
    log_file: Optional[Path] = Field(
        default=None,
        description="Файл для логов (по умолчанию только консоль)",
    )

    # Воспроизводимость
    seed: Optional[int] = Field(
        default=None,
        description="Переопределяет все seed из конфигов и манифестов",
    )
    workers: int = Field(default=1, ge=1, description="Процессы для фолдов LOSO")

    @field_validator("log_level")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        """Приведение уровня логирования к верхнему регистру."""
        return v.strip().upper()


# Глобальный экземпляр настроек
settings = Settings()
