"""Seeded training loop with early stopping, LR reduction on plateau and checkpoints."""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, TrainingDiverged, UndefinedAUCError
from .evaluation.metrics import roc_and_auc
from .modelzoo import (
    ClassificationLoss,
    ModelSpec,
    TransferModel,
    build_loss,
    build_optimizer,
    save_checkpoint,
)
from .pipeline.batching import BatchStream

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "val_auc")


def set_global_seed(seed: int, deterministic: bool = True, threads: int | None = None) -> None:
    """Seed Python, NumPy and torch; optionally pin torch to ``threads`` threads."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    os.environ["PYTHONHASHSEED"] = str(seed)
    if threads is not None:
        torch.set_num_threads(threads)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    early_stop_patience: int = 3
    early_stop_restore_best: bool = True
    lr_reduce_factor: float = 0.5
    lr_reduce_patience: int = 2
    min_lr: float = 1e-7
    checkpoint_dir: str | None = None
    keep_checkpoints: int | None = 5
    seed: int = 42
    # recompute trainable BatchNorm statistics after every epoch
    bn_recalibration: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.early_stop_patience < 1 or self.lr_reduce_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0.0 < self.lr_reduce_factor < 1.0:
            raise ConfigError("lr_reduce_factor must lie in (0, 1)")


class EarlyStopping:
    """Stop once the monitored loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; return True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


class ReduceLROnPlateau:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement.

    The counter restarts after each reduction. A reduction that would take the
    LR below ``min_lr`` is skipped, so the LR only ever takes values
    ``lr0 * factor**k``.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 2, min_lr: float = 1e-7):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> float:
        """Record an epoch's loss and return the LR for the next epoch."""
        if loss < self.best:
            self.best, self.wait = loss, 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            if self.lr * self.factor >= self.min_lr:
                self.lr *= self.factor
        return self.lr


def simulate_callbacks(val_losses, config: TrainConfig = TrainConfig(), lr: float = 1e-3) -> dict:
    """Replay the callback schedule over a fixed sequence of validation losses.

    Returns the epochs run, the epoch whose weights are restored, the
    per-epoch learning rates and the epochs at whose end the LR was reduced.
    """
    stopper = EarlyStopping(config.early_stop_patience)
    plateau = ReduceLROnPlateau(lr, config.lr_reduce_factor, config.lr_reduce_patience,
                                config.min_lr)
    lrs, reductions = [], []
    epochs = 0
    for epoch, loss in enumerate(val_losses[: config.max_epochs], start=1):
        epochs = epoch
        lrs.append(plateau.lr)
        stop = stopper.update(epoch, loss)
        if plateau.update(loss) < lrs[-1]:
            reductions.append(epoch)
        if stop:
            break
    return {
        "epochs_run": epochs,
        "restored_epoch": stopper.best_epoch,
        "lrs": lrs,
        "lr_reductions": reductions,
    }


@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in HISTORY_COLUMNS})
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainingHistory":
        with Path(path).open() as fh:
            rows = [
                {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)
            ]
        return cls(rows)

    def plot(self, path: str | Path) -> Path:
        from .evaluation.plots import plot_history

        return plot_history(self.rows, path)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _accuracy_counts(logits: torch.Tensor, labels: torch.Tensor) -> int:
    if logits.shape[1] == 1:
        pred = (logits[:, 0] >= 0).long()  # sigmoid(z) >= 0.5
    else:
        pred = logits.argmax(dim=1)
    return int((pred == labels).sum())


def _positive_scores(logits: torch.Tensor) -> torch.Tensor:
    if logits.shape[1] == 1:
        return torch.sigmoid(logits[:, 0])
    return torch.softmax(logits, dim=1)[:, 1]


@torch.no_grad()
def evaluate_loss(model: TransferModel, stream: BatchStream, loss_fn: ClassificationLoss) -> dict:
    """Mean loss (including the L2 penalty), accuracy and AUC over a stream."""
    model.eval()
    total, n, correct = 0.0, 0, 0
    labels, scores = [], []
    penalty = float(model.regularization_loss())
    for batch in stream.epoch(1):
        logits = model(batch.images)
        b = len(batch.labels)
        total += float(loss_fn(logits, batch.labels)) * b
        n += b
        correct += _accuracy_counts(logits, batch.labels)
        labels.append(batch.labels.numpy())
        scores.append(_positive_scores(logits).numpy())
    y = np.concatenate(labels)
    try:
        auc = roc_and_auc((y == 1).astype(int), np.concatenate(scores)).auc
    except UndefinedAUCError:
        auc = float("nan")
    return {"loss": total / n + penalty, "acc": correct / n, "auc": auc}


class _CheckpointKeeper:
    def __init__(self, directory: Path, keep: int | None):
        self.directory = directory
        self.keep = keep
        self.saved: list[tuple[int, Path]] = []

    @staticmethod
    def name(epoch: int) -> str:
        return f"ckpt_epoch_{epoch:03}.pt"

    def save(self, model, spec, epoch, seed, best_epoch, extra):
        path = save_checkpoint(model, spec, self.directory / self.name(epoch), seed, extra)
        self.saved.append((epoch, path))
        if self.keep is not None:
            recent = {e for e, _ in self.saved[-self.keep :]}
            for e, p in list(self.saved):
                if e not in recent and e != best_epoch:
                    p.unlink(missing_ok=True)
                    Path(str(p) + ".json").unlink(missing_ok=True)
                    self.saved.remove((e, p))


def recalibrate_batchnorm(model: nn.Module, stream: BatchStream, epoch: int = 1) -> int:
    """Replace the running statistics of trainable BatchNorm layers by exact averages.

    One gradient-free pass over ``stream`` with cumulative averaging, so the
    statistics used at evaluation time match the current weights. Layers in
    inference mode (frozen ones) keep their statistics. Returns the number of
    layers recalibrated.
    """
    model.train()
    layers = [m for m in model.modules()
              if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.training]
    if not layers:
        return 0
    momenta = [m.momentum for m in layers]
    for m in model.modules():
        m.training = False
    for m in layers:
        m.reset_running_stats()
        m.momentum = None
        m.training = True
    try:
        with torch.no_grad():
            for batch in stream.epoch(epoch):
                model(batch.images)
    finally:
        for m, momentum in zip(layers, momenta):
            m.momentum = momentum
        model.train()
    return len(layers)


def train(
    model: TransferModel,
    train_stream: BatchStream,
    val_stream: BatchStream,
    config: TrainConfig = TrainConfig(),
    spec: ModelSpec | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    loss_fn: ClassificationLoss | None = None,
    reseed: bool = True,
) -> tuple[TransferModel, TrainingHistory]:
    """Fit ``model`` and return it with the best-validation-loss weights loaded.

    Each epoch is followed by validation, the two callbacks and a checkpoint
    (written whatever the validation result). Training ends at
    ``max_epochs`` or when early stopping fires.
    """
    if reseed:
        set_global_seed(config.seed)
    spec = spec or ModelSpec()
    loss_fn = loss_fn or build_loss(model.head_config.num_classes)
    optimizer = optimizer or build_optimizer(spec.optimizer, model.parameters())
    lr0 = optimizer.param_groups[0]["lr"]
    stopper = EarlyStopping(config.early_stop_patience)
    plateau = ReduceLROnPlateau(lr0, config.lr_reduce_factor, config.lr_reduce_patience,
                                config.min_lr)
    keeper = (
        _CheckpointKeeper(Path(config.checkpoint_dir), config.keep_checkpoints)
        if config.checkpoint_dir
        else None
    )
    history = TrainingHistory(metadata={"seed": config.seed, "config": asdict(config)})
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, config.max_epochs + 1):
        lr = plateau.lr
        _set_lr(optimizer, lr)
        model.train()
        total, n, correct = 0.0, 0, 0
        for batch in train_stream.epoch(epoch):
            optimizer.zero_grad()
            logits = model(batch.images)
            loss = loss_fn(logits, batch.labels) + model.regularization_loss()
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, loss.item())
            loss.backward()
            optimizer.step()
            b = len(batch.labels)
            total += loss.item() * b
            n += b
            correct += _accuracy_counts(logits.detach(), batch.labels)

        if config.bn_recalibration:
            recalibrate_batchnorm(model, train_stream, epoch)
        val = evaluate_loss(model, val_stream, loss_fn)
        if not math.isfinite(val["loss"]):
            raise TrainingDiverged(epoch, val["loss"])
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total / n,
            "train_acc": correct / n,
            "val_loss": val["loss"],
            "val_acc": val["acc"],
            "val_auc": val["auc"],
        }
        history.rows.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items()})

        stop = stopper.update(epoch, val["loss"])
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        plateau.update(val["loss"])
        if keeper is not None:
            keeper.save(model, spec, epoch, config.seed, stopper.best_epoch, {"history_row": row})
        if stop:
            log.info("early stopping after epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    if config.early_stop_restore_best:
        model.load_state_dict(best_state)
    history.metadata["best_epoch"] = stopper.best_epoch
    history.metadata["stopped_early"] = len(history.rows) < config.max_epochs
    return model, history
