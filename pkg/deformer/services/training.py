"""Обучение и оценка: кросс-энтропия, Adam, косинусный шаг, LOSO."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from deformer.core.config import settings
from deformer.core.exceptions import AppException, ConfigurationError, DomainError
from deformer.core.logging import get_logger
from deformer.models.deformer import EEGDeformer
from deformer.schemas.config import ModelConfig, TrainConfig
from deformer.schemas.reports import LosoSummary, MetricsReport
from deformer.services.checkpoint import Checkpoint
from deformer.services.data import DataSplit, EEGDataset, loso_split
from deformer.services.metrics import accuracy, metrics_report
from deformer.tensor import ops
from deformer.tensor.engine import Tensor
from deformer.tensor.rng import RngState

logger = get_logger("training")

HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_acc"]


def cross_entropy(logits: Tensor, labels: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Среднее по батчу −log softmax(logits)[label]."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise DomainError(
            f"logits {logits.shape} and labels {y.shape} are not [B, C] and [B]"
        )
    batch, n_classes = logits.shape
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DomainError(
            f"labels outside [0, {n_classes})",
            details={"labels": sorted(set(y.tolist()))},
        )
    onehot = np.zeros((batch, n_classes), dtype=logits.dtype)
    onehot[np.arange(batch), y] = 1
    picked = ops.sum(ops.log_softmax(logits, axis=1) * Tensor(onehot))
    return -picked / logits.dtype.type(batch)


@dataclass
class AdamState:
    """Первый и второй моменты Adam и номер шага."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    hparams: TrainConfig,
) -> AdamState:
    """Шаг Adam с поправкой смещения; weight decay добавляется к градиенту (L2).

    Параметры обновляются на месте.
    """
    state.step += 1
    beta1, beta2 = hparams.betas
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = grads.get(name)
        g = np.zeros_like(param.data) if grad is None else grad
        if hparams.weight_decay:
            g = g + hparams.weight_decay * param.data
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + hparams.adam_eps)
        param.data = (param.data - lr * update).astype(param.dtype)
    return state


def cosine_lr(epoch: int, total_epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + ½(lr0 − lr_min)(1 + cos(π·epoch/total)); после расписания lr_min."""
    if epoch < 0 or total_epochs < 1:
        raise ConfigurationError(f"invalid schedule position {epoch}/{total_epochs}")
    if epoch >= total_epochs:
        return lr_min
    phase = math.pi * epoch / total_epochs
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(phase))


def predict(model: EEGDeformer, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.argmax(model.predict_logits(x, batch_size), axis=1)


def fit(
    model: EEGDeformer,
    train: DataSplit,
    val: DataSplit,
    config: TrainConfig,
) -> tuple[Checkpoint, pd.DataFrame]:
    """Обучение с выбором лучшей по валидации эпохи; при равенстве берётся ранняя.

    Перемешивание и dropout зависят только от ``config.seed``.
    """
    if len(train) == 0:
        raise ConfigurationError("training set is empty")
    if len(val) == 0:
        raise ConfigurationError("validation set is empty; raise val_fraction")
    if config.dropout_p is not None and config.dropout_p != model.config.dropout_p:
        model.config = model.config.model_copy(update={"dropout_p": config.dropout_p})

    root = RngState(config.seed)
    shuffle_rng = root.split("shuffle")
    model.dropout_rng = root.split("dropout")
    params = model.named_parameters()
    optimizer = AdamState.zeros(params)
    best: Optional[Checkpoint] = None
    rows = []

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        order = shuffle_rng.fold_in(epoch).permutation(len(train))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            logits, _ = model.forward(train.x[idx], "train")
            loss = cross_entropy(logits, train.y[idx])
            loss.backward()
            grads = {name: tensor.grad for name, tensor in params.items()}
            adam_step(params, grads, optimizer, lr, config)
            loss_sum += loss.item() * len(idx)

        train_loss = loss_sum / len(train)
        val_acc = accuracy(predict(model, val.x, config.batch_size), val.y)
        rows.append(
            {"epoch": epoch + 1, "lr": lr, "train_loss": train_loss, "val_acc": val_acc}
        )
        logger.info(
            f"Epoch {epoch + 1}/{config.epochs}: "
            f"loss {train_loss:.4f}, val acc {val_acc:.4f}",
            extra={
                "epoch": epoch + 1,
                "lr": lr,
                "loss": train_loss,
                "val_acc": val_acc,
            },
        )
        if best is None or val_acc > best.best_val_acc:
            best = Checkpoint.from_model(
                model, optimizer, epoch=epoch + 1, best_val_acc=val_acc
            )

    assert best is not None
    return best, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def evaluate(
    model: EEGDeformer, checkpoint: Checkpoint, data: DataSplit, batch_size: int = 64
) -> MetricsReport:
    """Оценка в eval-режиме на копии модели; исходная модель не меняется."""
    twin = checkpoint.restore(model)
    preds = predict(twin, data.x, batch_size)
    return metrics_report(preds, data.y, model.config.n_classes)


@dataclass(eq=False)
class FoldResult:
    subject_id: str
    report: MetricsReport
    checkpoint: Checkpoint
    history: pd.DataFrame


@dataclass(eq=False)
class LosoResult:
    folds: list[FoldResult]
    summary: LosoSummary


def fold_seed(seed: int, index: int) -> int:
    """Seed фолда зависит только от базового seed и номера субъекта."""
    return RngState(seed).fold_in(index).seed >> 1


def run_fold(
    dataset: EEGDataset,
    subject_id: str,
    index: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> FoldResult:
    """Один фолд LOSO; ошибки дополняются идентификатором субъекта."""
    seed = fold_seed(train_config.seed, index)
    try:
        train, val, test = loso_split(
            dataset,
            subject_id,
            val_fraction=train_config.val_fraction,
            seed=seed,
            per_subject=train_config.per_subject_split,
        )
        model = EEGDeformer(model_config, seed=seed)
        fold_config = train_config.model_copy(update={"seed": seed})
        checkpoint, history = fit(model, train, val, fold_config)
        report = evaluate(model, checkpoint, test, train_config.batch_size)
    except AppException as exc:
        exc.message = f"subject {subject_id}: {exc.message}"
        exc.args = (exc.message,)
        exc.details.setdefault("subject_id", subject_id)
        raise
    except Exception as exc:
        exc.add_note(f"while running LOSO fold for subject {subject_id}")
        raise
    logger.info(
        f"Subject {subject_id}: "
        f"acc {report.accuracy:.4f}, macro-F1 {report.macro_f1:.4f}",
        extra={
            "subject_id": subject_id,
            "accuracy": report.accuracy,
            "macro_f1": report.macro_f1,
        },
    )
    return FoldResult(subject_id, report, checkpoint, history)


def summarize(
    subjects: Sequence[str], reports: Sequence[MetricsReport], sample_std: bool = False
) -> LosoSummary:
    acc = np.array([r.accuracy for r in reports])
    f1 = np.array([r.macro_f1 for r in reports])
    ddof = 1 if sample_std and len(reports) > 1 else 0
    return LosoSummary(
        subjects=list(subjects),
        accuracy=acc.tolist(),
        macro_f1=f1.tolist(),
        acc_mean=float(acc.mean()),
        acc_std=float(acc.std(ddof=ddof)),
        f1_mean=float(f1.mean()),
        f1_std=float(f1.std(ddof=ddof)),
        std_kind="sample" if ddof else "population",
    )


def run_loso(
    dataset: EEGDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    workers: Optional[int] = None,
    on_fold: Optional[Callable[[FoldResult], None]] = None,
) -> LosoResult:
    """Все фолды LOSO: последовательно или в пуле процессов с тем же результатом."""
    if len(dataset.subjects) < 2:
        raise ConfigurationError("LOSO needs at least two subjects")
    if dataset.geometry != (model_config.channels, model_config.segment_len):
        raise ConfigurationError(
            f"dataset geometry {dataset.geometry} does not match model "
            f"(c={model_config.channels}, l={model_config.segment_len})"
        )
    workers = workers or train_config.workers or settings.workers
    subject_ids = dataset.subject_ids
    logger.info(
        f"Starting LOSO over {len(subject_ids)} subjects",
        extra={"subjects": len(subject_ids), "workers": workers},
    )

    folds: list[FoldResult] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_fold, dataset, sid, i, model_config, train_config)
                for i, sid in enumerate(subject_ids)
            ]
            for future in futures:
                folds.append(future.result())
                if on_fold:
                    on_fold(folds[-1])
    else:
        for i, sid in enumerate(subject_ids):
            folds.append(run_fold(dataset, sid, i, model_config, train_config))
            if on_fold:
                on_fold(folds[-1])

    summary = summarize(subject_ids, [f.report for f in folds], train_config.sample_std)
    logger.info(
        f"LOSO done: acc {summary.acc_mean:.4f} ± {summary.acc_std:.4f}, "
        f"macro-F1 {summary.f1_mean:.4f} ± {summary.f1_std:.4f}",
        extra={"acc_mean": summary.acc_mean, "f1_mean": summary.f1_mean},
    )
    return LosoResult(folds, summary)
