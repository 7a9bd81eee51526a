"""Baseline training and post-surgery fine-tuning.

SGD with momentum and weight decay on cross-entropy; learning-rate schedule
``step``, ``cosine_warm_restarts`` or ``none``. Defaults come from
``recipes.yaml``.
"""

import copy
import csv
import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Literal

import torch
import torch.nn.functional as F
import yaml
from torch import nn
from torch.utils.data import DataLoader, Dataset

from srprune.datasets import (
    SampleSet,
    TransformedDataset,
    is_image,
    train_transform,
)
from srprune.errors import ConfigError, TrainingError
from srprune.srinit import predict_top1

logger = logging.getLogger(__name__)

Schedule = Literal["cosine_warm_restarts", "step", "none"]
SCHEDULES: tuple[str, ...] = ("cosine_warm_restarts", "step", "none")
HISTORY_CSV_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")

# Load recipe defaults from YAML
RECIPES_PATH = Path(__file__).parent / "recipes.yaml"
try:
    with RECIPES_PATH.open() as f:
        _RECIPES: dict[str, dict[str, Any]] = yaml.safe_load(f) or {}
except (FileNotFoundError, yaml.YAMLError):
    _RECIPES = {}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loop settings for one training run."""

    optimizer: Literal["sgd"] = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.005
    batch_size: int = 256
    epochs: int = 150
    schedule: Schedule = "step"
    seed: int = 0
    t0: int = 10  # warm-restart period in epochs
    t_mult: int = 2  # warm-restart period multiplier
    step_size: int = 50
    gamma: float = 0.1
    augment: bool = True  # random crop + horizontal flip for image inputs
    device: str = "cpu"

    def __post_init__(self) -> None:
        """Validate the configuration."""
        problems = []
        if self.optimizer != "sgd":
            problems.append(f"optimizer must be 'sgd', got {self.optimizer!r}")
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule must be one of {SCHEDULES}")
        if self.t0 < 1 or self.t_mult < 1:
            problems.append("t0 and t_mult must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_recipe(cls, name: str, **overrides: Any) -> "TrainConfig":  # noqa: ANN401
        """Recipe defaults from ``recipes.yaml`` with keyword overrides.

        Raises:
            ConfigError: If the recipe or an override key is unknown

        """
        known = {f.name for f in fields(cls)}
        values = dict(_RECIPES.get(name, {}))
        values.update(overrides)
        unknown = sorted(set(values) - known)
        if unknown:
            msg = f"Unknown training keys: {unknown}"
            raise ConfigError(msg)
        return cls(**values)


@dataclass(frozen=True)
class EpochRecord:
    """Metrics of one epoch."""

    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float | None = None


def _make_scheduler(
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
) -> torch.optim.lr_scheduler.LRScheduler | None:
    if config.schedule == "cosine_warm_restarts":
        return torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
            optimizer,
            T_0=config.t0,
            T_mult=config.t_mult,
        )
    if config.schedule == "step":
        return torch.optim.lr_scheduler.StepLR(
            optimizer,
            step_size=config.step_size,
            gamma=config.gamma,
        )
    return None


def restart_epochs(config: TrainConfig) -> list[int]:
    """0-based epochs at which the warm-restart schedule is back at ``lr``."""
    if config.schedule != "cosine_warm_restarts":
        return [0]
    epochs, start, period = [], 0, config.t0
    while start < config.epochs:
        epochs.append(start)
        start += period
        period *= config.t_mult
    return epochs


def train(
    model: nn.Module,
    dataset: SampleSet,
    config: TrainConfig,
    *,
    val_dataset: SampleSet | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[nn.Module, list[EpochRecord]]:
    """Train a copy of ``model`` on ``dataset``.

    Batches come from a shuffling ``DataLoader`` whose generator is seeded
    with ``config.seed``; augmentation draws come from the global torch RNG,
    seeded with ``config.seed`` inside a forked RNG state so the caller's
    state is left untouched. Batches of a single sample are skipped because
    batch normalization cannot train on them.

    Args:
        model: Model to start from, left unmodified
        dataset: Training set
        config: Optimizer and schedule settings
        val_dataset: Evaluated (in eval mode) after every epoch when given
        on_epoch: Called with each epoch's record

    Returns:
        (trained model in the input model's mode, per-epoch history)

    Raises:
        TrainingError: If the loss becomes non-finite

    """
    if config.epochs == 0:
        return model, []

    was_training = model.training
    source_device = next(model.parameters()).device
    trained = copy.deepcopy(model).to(config.device)
    dtype = next(trained.parameters()).dtype
    optimizer = torch.optim.SGD(
        trained.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    scheduler = _make_scheduler(optimizer, config)
    source: Dataset = dataset
    if config.augment and is_image(dataset.sample_shape):
        source = TransformedDataset(dataset, train_transform(dataset.sample_shape))
    loader = DataLoader(
        source,
        batch_size=config.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(config.seed),
    )

    history: list[EpochRecord] = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(1, config.epochs + 1):
            lr = optimizer.param_groups[0]["lr"]
            trained.train()
            loss_sum, correct, seen = 0.0, 0, 0
            for x_batch, y_batch in loader:
                if y_batch.numel() < 2:  # noqa: PLR2004
                    continue
                x = x_batch.to(config.device, dtype)
                y = y_batch.to(config.device)
                logits = trained(x)
                loss = F.cross_entropy(logits, y)
                if not math.isfinite(loss.item()):
                    raise TrainingError(epoch, loss.item())
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * y.numel()
                correct += int((logits.argmax(dim=1) == y).sum())
                seen += y.numel()
            if scheduler is not None:
                scheduler.step()

            val_acc = predict_top1(trained, val_dataset)[0] if val_dataset else None
            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / max(seen, 1),
                train_acc=correct / max(seen, 1),
                val_acc=val_acc,
            )
            history.append(record)
            logger.info(
                "epoch %d lr=%.5f loss=%.4f acc=%.4f val=%s",
                epoch,
                lr,
                record.train_loss,
                record.train_acc,
                "-" if val_acc is None else f"{val_acc:.4f}",
            )
            if on_epoch is not None:
                on_epoch(record)

    trained.to(source_device)
    trained.train(was_training)
    return trained, history


def finetune(
    pruned_model: nn.Module,
    dataset: SampleSet,
    config: TrainConfig | None = None,
    *,
    val_dataset: SampleSet | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[nn.Module, list[EpochRecord]]:
    """Recover accuracy of a pruned model from its surviving parameters.

    Defaults to the ``finetune`` recipe (cosine annealing with warm
    restarts). Topology is never changed.
    """
    config = config or TrainConfig.from_recipe("finetune")
    return train(
        pruned_model,
        dataset,
        config,
        val_dataset=val_dataset,
        on_epoch=on_epoch,
    )


def write_history_csv(history: list[EpochRecord], path: str | Path) -> None:
    """Write epoch, lr, train_loss, train_acc, val_acc rows."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_CSV_FIELDS)
        writer.writeheader()
        for record in history:
            row = asdict(record)
            row["val_acc"] = "" if record.val_acc is None else record.val_acc
            writer.writerow(row)
