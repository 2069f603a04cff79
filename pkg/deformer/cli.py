"""Командная строка: generate-data, train, loso, eval, saliency, gradcheck, info."""

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd

from deformer.core.config import settings
from deformer.core.exceptions import (
    EXIT_OK,
    EXIT_USAGE,
    ConfigurationError,
    GradientCheckError,
    UsageError,
    handle_exception,
)
from deformer.core.logging import get_logger, setup_logging
from deformer.models.deformer import EEGDeformer
from deformer.models.shapes import macs_estimate, param_count, shape_audit
from deformer.schemas.config import ModelConfig, RunConfig
from deformer.schemas.reports import RunManifest
from deformer.services.checkpoint import (
    CHECKPOINT_FORMAT_VERSION,
    load_checkpoint,
    save_checkpoint,
)
from deformer.services.data import (
    EEGDataset,
    export_segment_index,
    generate_synthetic,
    loso_split,
    subject_split,
    train_val_split,
)
from deformer.services.dataset_io import FORMAT_VERSION as EEGD_FORMAT_VERSION
from deformer.services.dataset_io import read_dataset, write_dataset
from deformer.services.run_config import (
    load_run_config,
    load_synthetic_spec,
    resolve_config_path,
)
from deformer.services.saliency import average_saliency, export_saliency, saliency
from deformer.services.training import (
    FoldResult,
    cross_entropy,
    evaluate,
    fit,
    run_loso,
)
from deformer.tensor.gradcheck import check_gradients
from deformer.tensor.rng import RngState
from deformer.utils.hashing import canonical_json, sha256_file

logger = get_logger("cli")

FORMAT_VERSIONS = {"eegd": EEGD_FORMAT_VERSION, "checkpoint": CHECKPOINT_FORMAT_VERSION}


# Вспомогательные функции


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(payload), encoding="utf-8")
    return path


def _write_manifest(
    path: Path,
    args: argparse.Namespace,
    config: dict[str, Any],
    seeds: dict[str, int],
    input_hashes: dict[str, str],
    started_at: datetime,
) -> Path:
    manifest = RunManifest(
        command=["deformer", *args.argv],
        config=config,
        seeds=seeds,
        format_versions=FORMAT_VERSIONS,
        input_hashes=input_hashes,
        package_version=settings.VERSION,
        started_at=started_at,
        finished_at=datetime.now(timezone.utc),
    )
    return _write_json(path, manifest.model_dump(mode="json"))


def _config_hashes(args: argparse.Namespace) -> dict[str, str]:
    hashes = {}
    if getattr(args, "dataset", None):
        hashes["dataset"] = sha256_file(args.dataset)
    if getattr(args, "config", None):
        hashes["config"] = sha256_file(resolve_config_path(args.config))
    return hashes


def _overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.set or [])
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"train.workers={args.workers}")
    return overrides


def _geometry(dataset: EEGDataset) -> dict[str, Any]:
    c, seg_len = dataset.geometry
    return {
        "channels": c,
        "segment_len": seg_len,
        "sampling_rate": dataset.sampling_rate,
        "n_classes": dataset.n_classes,
    }


def _check_compatible(model: ModelConfig, dataset: EEGDataset) -> None:
    """Геометрия модели проверяется до начала обучения."""
    c, seg_len = dataset.geometry
    found = {"channels": c, "segment_len": seg_len, "n_classes": dataset.n_classes}
    wanted = {
        "channels": model.channels,
        "segment_len": model.segment_len,
        "n_classes": model.n_classes,
    }
    diff = [
        f"model.{k}={wanted[k]} vs dataset {found[k]}"
        for k in wanted
        if wanted[k] != found[k]
    ]
    if diff:
        raise ConfigurationError(
            f"Model geometry does not match dataset: {diff[0]}",
            details={"mismatches": diff},
        )
    if model.sampling_rate != dataset.sampling_rate:
        logger.warning(
            f"Model sampling rate {model.sampling_rate} Hz differs from dataset "
            f"{dataset.sampling_rate} Hz",
            extra={
                "model_fs": model.sampling_rate,
                "dataset_fs": dataset.sampling_rate,
            },
        )


def _load_run(args: argparse.Namespace, dataset: EEGDataset) -> RunConfig:
    config = load_run_config(
        args.config, _overrides(args), model_defaults=_geometry(dataset)
    )
    _check_compatible(config.model, dataset)
    return config


def _save_fold(out: Path, fold: FoldResult) -> None:
    save_checkpoint(fold.checkpoint, out / "checkpoint")
    fold.history.to_csv(out / "history.csv", index=False)
    _write_json(out / "metrics.json", fold.report.model_dump(mode="json"))


# Команды


def cmd_generate_data(args: argparse.Namespace) -> int:
    """Синтетический датасет EEGD и его манифест."""
    started = datetime.now(timezone.utc)
    spec = load_synthetic_spec(args.spec, args.set or [])
    seed = settings.seed if settings.seed is not None else args.seed
    dataset = generate_synthetic(spec, seed)
    out = write_dataset(dataset, args.out)
    if args.index_csv:
        export_segment_index(dataset, args.index_csv)
    hashes = {"output": sha256_file(out)}
    if args.spec:
        hashes["spec"] = sha256_file(resolve_config_path(args.spec))
    _write_manifest(
        out.with_name(out.name + ".manifest.json"),
        args,
        {"data": spec.model_dump(mode="json")},
        {"data": seed},
        hashes,
        started,
    )
    print(out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Одно обучение: лучший чекпоинт, история, метрики, манифест."""
    started = datetime.now(timezone.utc)
    dataset = read_dataset(args.dataset)
    config = _load_run(args, dataset)
    train_cfg = config.train
    if args.holdout:
        train, val, holdout = loso_split(
            dataset,
            args.holdout,
            train_cfg.val_fraction,
            train_cfg.seed,
            train_cfg.per_subject_split,
        )
        splits = {"val": val, "test": holdout}
    else:
        train, val = train_val_split(
            dataset, train_cfg.val_fraction, train_cfg.seed, train_cfg.per_subject_split
        )
        splits = {"val": val}

    model = EEGDeformer(config.model, seed=train_cfg.seed)
    checkpoint, history = fit(model, train, val, train_cfg)

    out = Path(args.out_dir)
    save_checkpoint(checkpoint, out / "checkpoint")
    history.to_csv(out / "history.csv", index=False)
    metrics = {
        name: evaluate(model, checkpoint, split, train_cfg.batch_size).model_dump(
            mode="json"
        )
        for name, split in splits.items()
    }
    _write_json(out / "metrics.json", metrics)
    _write_manifest(
        out / "manifest.json",
        args,
        config.model_dump(mode="json"),
        {"train": train_cfg.seed},
        _config_hashes(args),
        started,
    )
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_loso(args: argparse.Namespace) -> int:
    """LOSO по всем субъектам: подкаталоги фолдов и сводная таблица."""
    started = datetime.now(timezone.utc)
    dataset = read_dataset(args.dataset)
    config = _load_run(args, dataset)
    out = Path(args.out_dir)

    result = run_loso(
        dataset,
        config.model,
        config.train,
        on_fold=lambda fold: _save_fold(out / fold.subject_id, fold),
    )
    summary = result.summary
    rows = [
        {"subject": s, "acc": a, "f1_macro": f}
        for s, a, f in zip(summary.subjects, summary.accuracy, summary.macro_f1)
    ]
    rows += [
        {"subject": "mean", "acc": summary.acc_mean, "f1_macro": summary.f1_mean},
        {"subject": "std", "acc": summary.acc_std, "f1_macro": summary.f1_std},
    ]
    summary_table = pd.DataFrame(rows, columns=["subject", "acc", "f1_macro"])
    summary_table.to_csv(out / "summary.csv", index=False)
    _write_json(out / "summary.json", summary.model_dump(mode="json"))
    _write_manifest(
        out / "manifest.json",
        args,
        config.model_dump(mode="json"),
        {"train": config.train.seed},
        _config_hashes(args),
        started,
    )
    print(f"ACC {summary.acc_mean:.4f} ± {summary.acc_std:.4f}")
    print(f"F1  {summary.f1_mean:.4f} ± {summary.f1_std:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.dataset)
    _check_compatible(checkpoint.config, dataset)
    data = subject_split(dataset, args.subject)
    report = evaluate(EEGDeformer(checkpoint.config), checkpoint, data)
    payload = report.model_dump(mode="json")
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_saliency(args: argparse.Namespace) -> int:
    """Средняя по субъектам карта значимости для сегментов заданного класса."""
    checkpoint = load_checkpoint(args.checkpoint)
    n_classes = checkpoint.config.n_classes
    if not 0 <= args.class_idx < n_classes:
        raise UsageError(
            f"--class {args.class_idx} outside [0, {n_classes})",
            details={"class_idx": args.class_idx},
        )
    dataset = read_dataset(args.dataset)
    _check_compatible(checkpoint.config, dataset)
    model = EEGDeformer(checkpoint.config)
    subjects = (
        [dataset.subject(s) for s in args.subject] if args.subject else dataset.subjects
    )

    maps = []
    for subject in subjects:
        selected = subject.segments[subject.labels == args.class_idx]
        if len(selected) == 0:
            logger.warning(
                f"Subject {subject.subject_id} has no class {args.class_idx} segments, "
                "using all",
                extra={"subject_id": subject.subject_id},
            )
            selected = subject.segments
        maps.append(
            saliency(
                model,
                checkpoint,
                selected,
                args.class_idx,
                subject_id=subject.subject_id,
                channel_names=dataset.channel_names,
            )
        )
    averaged = average_saliency(maps)
    export_saliency(averaged, args.out, args.format)
    ranking = np.argsort(-averaged.channel_scores, kind="stable")
    for idx in ranking:
        print(f"{averaged.channel_names[idx]}\t{averaged.channel_scores[idx]:.4f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Сравнение backward с центральными разностями в 64-битной точности."""
    config = load_run_config(args.config, args.set or [])
    model_cfg = ModelConfig.model_validate(
        {**config.model.model_dump(), "precision": "float64"}
    )
    model = EEGDeformer(model_cfg, seed=config.train.seed)
    rng = RngState(config.train.seed).split("gradcheck")
    x = rng.normal((args.batch, model_cfg.channels, model_cfg.segment_len))
    y = np.arange(args.batch) % model_cfg.n_classes

    results = check_gradients(
        lambda: cross_entropy(model.forward(x, "eval")[0], y),
        model.named_parameters(),
        h=args.step,
        samples=args.samples,
        rng=rng.split("samples"),
    )
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed(args.tolerance) else "FAIL"
        print(
            f"{r.name:<{width}}  {r.max_rel_error:.3e}  {r.checked}/{r.total}  {status}"
        )
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error: {worst:.3e} (tolerance {args.tolerance:g})")
    failed = [r.name for r in results if not r.passed(args.tolerance)]
    if failed:
        raise GradientCheckError(
            f"{len(failed)} parameter groups exceed tolerance {args.tolerance:g}: "
            f"{', '.join(failed)}",
            details={"failed": failed},
        )
    return EXIT_OK


def cmd_info(args: argparse.Namespace) -> int:
    """Таблица форм, число параметров, оценка MAC и включённые абляции."""
    overrides = list(args.set or [])
    if args.preset:
        overrides.insert(0, f"model.preset={args.preset}")
    if args.config is None and not args.preset:
        raise UsageError("info needs --config or --preset")
    model = load_run_config(args.config, overrides).model
    audit = shape_audit(model)
    info = {
        "shapes": {name: list(shape) for name, shape in audit.as_dict().items()},
        "kernel_len": audit.kernel_len,
        "lengths": audit.lengths,
        "embedding_len": audit.embedding_len,
        "param_count": param_count(model),
        "macs": macs_estimate(model),
        "ablations": {
            "ftl_enabled": model.ftl_enabled,
            "dense_enabled": model.dense_enabled,
            "ip_mode": model.ip_mode,
            "ip_source": model.effective_ip_source,
            "ip_removed": list(model.ip_removed),
        },
    }
    if args.json:
        print(canonical_json(info), end="")
        return EXIT_OK

    width = max(len(name) for name in info["shapes"])
    for name, shape in info["shapes"].items():
        print(f"{name:<{width}}  {tuple(shape)}")
    print(f"kernel length: {info['kernel_len']}")
    print(f"lengths: {' -> '.join(map(str, info['lengths']))}")
    print(f"embedding length: {info['embedding_len']}")
    print(f"parameters: {info['param_count']}")
    print(f"MACs: {info['macs']}")
    for key, value in info["ablations"].items():
        print(f"{key}: {value}")
    return EXIT_OK


# Парсер


def _add_common(
    parser: argparse.ArgumentParser, config_required: bool = False
) -> None:
    parser.add_argument(
        "--config",
        required=config_required,
        help="TOML-конфигурация, имя встроенной (toy, synthetic) или manifest.json",
    )
    parser.add_argument(
        "--set",
        action="append",
        metavar="SECTION.FIELD=VALUE",
        help="Переопределение поля",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deformer", description=f"{settings.PROJECT_NAME}: обучение и анализ"
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"{settings.PROJECT_NAME} {settings.VERSION}",
    )
    parser.add_argument("--log-level", default=None, help="Уровень логирования")
    sub = parser.add_subparsers(dest="command", help="Доступные команды")

    def add(
        name: str, handler: Callable[[argparse.Namespace], int], text: str
    ) -> argparse.ArgumentParser:
        command = sub.add_parser(name, help=text)
        command.set_defaults(handler=handler)
        return command

    gen = add("generate-data", cmd_generate_data, "Синтетический датасет")
    gen.add_argument(
        "--spec", default=None, help="TOML с таблицей [data] (по умолчанию встроенная)"
    )
    gen.add_argument("--out", required=True, help="Путь к файлу EEGD")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--index-csv", default=None, help="CSV с метаданными сегментов")
    gen.add_argument("--set", action="append", metavar="data.FIELD=VALUE")

    for name, handler, text in (
        ("train", cmd_train, "Обучение на одном разбиении"),
        ("loso", cmd_loso, "Кросс-валидация leave-one-subject-out"),
    ):
        command = add(name, handler, text)
        command.add_argument("--dataset", required=True)
        command.add_argument("--out-dir", required=True)
        command.add_argument("--epochs", type=int, default=None)
        command.add_argument("--seed", type=int, default=None)
        _add_common(command)
        if name == "train":
            command.add_argument(
                "--holdout", default=None, help="Отложенный субъект для теста"
            )
        else:
            command.add_argument(
                "--workers", type=int, default=None, help="Процессы для фолдов"
            )

    ev = add("eval", cmd_eval, "Оценка чекпоинта")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--subject", action="append", help="Только указанные субъекты")
    ev.add_argument("--out", default=None, help="Куда записать отчёт JSON")

    sal = add("saliency", cmd_saliency, "Карта значимости")
    sal.add_argument("--checkpoint", required=True)
    sal.add_argument("--dataset", required=True)
    sal.add_argument("--class", dest="class_idx", type=int, required=True)
    sal.add_argument("--out", required=True)
    sal.add_argument("--format", choices=["csv", "pgm"], default="csv")
    sal.add_argument("--subject", action="append")

    grad = add("gradcheck", cmd_gradcheck, "Проверка градиентов")
    _add_common(grad)
    grad.set_defaults(config="toy")
    grad.add_argument("--tolerance", type=float, default=1e-4)
    grad.add_argument("--step", type=float, default=1e-5, help="Шаг конечных разностей")
    grad.add_argument("--samples", type=int, default=None, help="Элементов на группу")
    grad.add_argument("--batch", type=int, default=2)

    info = add("info", cmd_info, "Формы, параметры и MAC")
    _add_common(info)
    info.add_argument("--preset", default=None)
    info.add_argument("--json", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Точка входа; возвращает код завершения."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    setup_logging(args.log_level)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.handler(args)
    except Exception as exc:
        return handle_exception(exc)


if __name__ == "__main__":
    sys.exit(main())
