#!/usr/bin/env python3
"""
Скрипт запуска EEG-Deformer.
Установка зависимостей, тесты, линтеры и демонстрационный прогон на синтетике.
"""

import argparse
import shutil
import subprocess
import sys
from pathlib import Path
from typing import List


class ProjectRunner:
    """Класс для управления запуском проекта."""

    def __init__(self):
        self.project_root = Path(__file__).parent
        self.package = "deformer"
        self.cli_module = "deformer.cli"

    def check_python_version(self) -> bool:
        """Проверка версии Python."""
        if sys.version_info < (3, 11):
            print("❌ Требуется Python 3.11 или выше")
            return False
        print(f"✅ Python {sys.version_info.major}.{sys.version_info.minor}")
        return True

    def check_dependencies(self) -> bool:
        """Проверка установленных зависимостей."""
        try:
            import numpy  # noqa: F401
            import pandas  # noqa: F401
            import pydantic  # noqa: F401
            import scipy  # noqa: F401

            print("✅ Основные зависимости установлены")
            return True
        except ImportError as e:
            print(f"❌ Отсутствуют зависимости: {e}")
            return False

    def install_dependencies(self, use_poetry: bool = False) -> bool:
        """Установка зависимостей."""
        print("📦 Установка зависимостей...")

        if use_poetry and shutil.which("poetry"):
            cmd = ["poetry", "install"]
        else:
            cmd = [sys.executable, "-m", "pip", "install", "-r", "requirements-dev.txt"]

        try:
            subprocess.run(cmd, check=True, cwd=self.project_root)
            print("✅ Зависимости установлены")
            return True
        except subprocess.CalledProcessError:
            print("❌ Ошибка установки зависимостей")
            return False

    def run_cli(self, args: List[str]) -> int:
        """Запуск команды deformer."""
        cmd = [sys.executable, "-m", self.cli_module, *args]
        return subprocess.run(cmd, cwd=self.project_root).returncode

    def run_demo(self, out_dir: Path, workers: int) -> int:
        """Синтетический датасет по умолчанию и LOSO на нём."""
        print(f"🧠 Демонстрационный прогон в {out_dir}")
        dataset = out_dir / "synthetic.eegd"
        steps = [
            ["generate-data", "--spec", "synthetic", "--out", str(dataset)],
            [
                "loso",
                "--dataset", str(dataset),
                "--config", "synthetic",
                "--out-dir", str(out_dir / "loso"),
                "--workers", str(workers),
            ],
        ]
        for step in steps:
            code = self.run_cli(step)
            if code != 0:
                print(f"❌ Команда {step[0]} завершилась с кодом {code}")
                return code
        print(f"✅ Сводка: {out_dir / 'loso' / 'summary.csv'}")
        return 0

    def run_tests(self, include_slow: bool = False) -> None:
        """Запуск тестов."""
        print("🧪 Запуск тестов...")

        if not shutil.which("pytest"):
            print("❌ pytest не установлен")
            return

        cmd = ["pytest", "-v"]
        if not include_slow:
            cmd += ["-m", "not slow"]
        subprocess.run(cmd, cwd=self.project_root)

    def lint_code(self) -> None:
        """Проверка кода линтерами."""
        print("🔍 Проверка кода...")
        targets = [self.package, "tests"]

        # Black
        if shutil.which("black"):
            print("Форматирование с Black...")
            subprocess.run(["black", *targets], cwd=self.project_root)

        # isort
        if shutil.which("isort"):
            print("Сортировка импортов с isort...")
            subprocess.run(["isort", *targets], cwd=self.project_root)

        # flake8
        if shutil.which("flake8"):
            print("Проверка с flake8...")
            subprocess.run(
                ["flake8", "--max-line-length", "88", *targets], cwd=self.project_root
            )

    def show_info(self) -> None:
        """Показать информацию о проекте."""
        print("📋 Информация о проекте:")
        print(f"   Корневая папка: {self.project_root}")
        print(f"   Пакет: {self.package}")
        print(f"   Python версия: {sys.version}")

        # Проверка файлов
        files_to_check = [".env", "requirements.txt", "pyproject.toml"]
        for file in files_to_check:
            path = self.project_root / file
            status = "✅" if path.exists() else "❌"
            print(f"   {file}: {status}")

        config_dir = self.project_root / self.package / "configs"
        configs = sorted(p.stem for p in config_dir.glob("*.toml"))
        print(f"   Встроенные конфигурации: {', '.join(configs)}")


def main():
    """Главная функция."""
    parser = argparse.ArgumentParser(description="Скрипт запуска EEG-Deformer")

    subparsers = parser.add_subparsers(dest="command", help="Доступные команды")

    # Команда demo
    demo_parser = subparsers.add_parser("demo", help="Синтетика + LOSO")
    demo_parser.add_argument(
        "--out-dir", default="runs/demo", help="Каталог результатов"
    )
    demo_parser.add_argument(
        "--workers", type=int, default=4, help="Процессы для фолдов"
    )

    # Команда cli
    cli_parser = subparsers.add_parser("cli", help="Передать аргументы в deformer")
    cli_parser.add_argument("args", nargs=argparse.REMAINDER)

    # Команда install
    install_parser = subparsers.add_parser("install", help="Установка зависимостей")
    install_parser.add_argument(
        "--poetry", action="store_true", help="Использовать Poetry"
    )

    # Команда test
    test_parser = subparsers.add_parser("test", help="Запуск тестов")
    test_parser.add_argument(
        "--slow", action="store_true", help="Включить длинные прогоны"
    )

    # Другие команды
    subparsers.add_parser("lint", help="Проверка и форматирование кода")
    subparsers.add_parser("info", help="Информация о проекте")

    args = parser.parse_args()

    runner = ProjectRunner()

    # Проверка Python версии
    if not runner.check_python_version():
        sys.exit(1)

    if args.command in ("demo", "cli"):
        if not runner.check_dependencies():
            print("Попробуй: python run.py install")
            sys.exit(1)
        if args.command == "demo":
            sys.exit(runner.run_demo(Path(args.out_dir), args.workers))
        sys.exit(runner.run_cli(args.args))

    elif args.command == "install":
        runner.install_dependencies(use_poetry=args.poetry)

    elif args.command == "test":
        runner.run_tests(include_slow=args.slow)

    elif args.command == "lint":
        runner.lint_code()

    elif args.command == "info":
        runner.show_info()

    else:
        print("🧠 Скрипт запуска EEG-Deformer")
        print("\nДоступные команды:")
        print("  demo    - Синтетический датасет и LOSO")
        print("  cli     - Любая команда deformer")
        print("  install - Установка зависимостей")
        print("  test    - Запуск тестов")
        print("  lint    - Проверка кода")
        print("  info    - Информация о проекте")
        print("\nПримеры:")
        print("  python run.py demo --workers 4")
        print("  python run.py cli info --preset dataset-i")
        print("  python run.py cli gradcheck --config toy")
        print("  python run.py test --slow")


if __name__ == "__main__":
    main()
