"""Сервисы: данные, обучение, чекпоинты, значимость."""
