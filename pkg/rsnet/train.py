"""Mini-batch training loop with AdamW, a loss-log CSV and resumable checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from rsnet.boxes import GroundTruthBox
from rsnet.checkpoint import save_checkpoint
from rsnet.data import Dataset
from rsnet.detect import detection_loss
from rsnet.errors import ConfigError, DataError, NumericError
from rsnet.heatmap import as_batch
from rsnet.model import RSNet
from rsnet.optim import LR, WEIGHT_DECAY, OptimizerState, adamw_step, decay_conv_weights, scheduled_lr
from rsnet.rng import Rng
from rsnet.tensor import Tape, zero_grads

logger = logging.getLogger("rsnet.train")

LOSS_COLUMNS = ("step", "lr", "loss_total", "loss_cls", "loss_box")


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 1
    batch_size: int = 8
    lr: float = LR
    weight_decay: float = WEIGHT_DECAY
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup steps must be >= 0, got {self.warmup_steps}")


@dataclass(frozen=True)
class StepLoss:
    step: int
    lr: float
    total: float
    cls: float
    box: float

    def row(self) -> list[str]:
        return [str(self.step), f"{self.lr:.8g}", f"{self.total:.8g}", f"{self.cls:.8g}", f"{self.box:.8g}"]


@dataclass(frozen=True)
class TrainResult:
    history: tuple[StepLoss, ...]
    optimizer: OptimizerState
    checkpoint: Path | None

    @property
    def first_loss(self) -> float:
        return self.history[0].total if self.history else math.nan

    @property
    def last_loss(self) -> float:
        return self.history[-1].total if self.history else math.nan

    @property
    def falling_fraction(self) -> float:
        """Share of steps whose loss is below the previous step's."""
        totals = [step.total for step in self.history]
        if len(totals) < 2:
            return math.nan
        return sum(b < a for a, b in zip(totals, totals[1:])) / (len(totals) - 1)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return math.ceil(n_images / batch_size)


def epoch_order(n_images: int, epoch: int, seed: int) -> np.ndarray:
    """Shuffled sample order for one epoch; depends only on (seed, epoch)."""
    return Rng(seed, f"train.epoch.{epoch}").generator.permutation(n_images)


def iter_batches(
    dataset: Dataset, order: Sequence[int], batch_size: int, channels: int, dtype
) -> Iterator[tuple[np.ndarray, list[list[GroundTruthBox]]]]:
    for start in range(0, len(order), batch_size):
        images, truth = [], []
        for index in order[start:start + batch_size]:
            pixels, boxes = dataset.load(int(index))
            images.append(as_batch(pixels, channels, dtype))
            truth.append(boxes)
        yield np.concatenate(images, axis=0), truth


def train_step(
    model: RSNet,
    images: np.ndarray,
    truth: Sequence[Sequence[GroundTruthBox]],
    optimizer: OptimizerState,
    lr: float,
) -> StepLoss:
    """Forward, backward and one AdamW update. Gradients are reset first."""
    params = model.parameters()
    zero_grads(params)
    model.train().at_step(optimizer.step)
    with Tape() as tape:
        levels = model(images)
        terms = detection_loss(levels, truth, model.cfg.strides, images.shape[2:], model.cfg.assign_ranges)
    tape.backward(terms.total)
    for name, param in model.named_parameters():
        if param.grad is not None and not np.isfinite(param.grad).all():
            raise NumericError("backward", layer=name.rsplit(".", 1)[0])
    adamw_step(params, optimizer, decay=decay_conv_weights, lr=lr)
    return StepLoss(optimizer.step, lr, terms.total.item(), terms.cls.item(), terms.box.item())


class LossLog:
    """Append-only CSV with a fixed column schema."""

    def __init__(self, path: str | Path, resume: bool = False):
        self.path = Path(path)
        fresh = not (resume and self.path.exists())
        try:
            self._handle = self.path.open("w" if fresh else "a", newline="", encoding="utf-8")
        except OSError as err:
            raise DataError(f"cannot open loss log {self.path}: {err.strerror or err}") from err
        self._writer = csv.writer(self._handle)
        if fresh:
            self._writer.writerow(LOSS_COLUMNS)

    def write(self, loss: StepLoss) -> None:
        self._writer.writerow(loss.row())
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "LossLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def train(
    model: RSNet,
    dataset: Dataset,
    options: TrainOptions,
    optimizer: OptimizerState | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train for ``options.epochs`` epochs, continuing the step counter of ``optimizer`` if given.

    With ``out_dir`` the loss log goes to ``loss.csv`` and the final state to
    ``model.ckpt`` (also written after every epoch).
    """
    resume = optimizer is not None
    if optimizer is None:
        optimizer = OptimizerState(lr=options.lr, weight_decay=options.weight_decay)
    per_epoch = steps_per_epoch(len(dataset), options.batch_size)
    total_steps = per_epoch * options.epochs
    if optimizer.step >= total_steps:
        logger.warning("checkpoint is already at step %d of %d; nothing to do", optimizer.step, total_steps)

    out = Path(out_dir) if out_dir is not None else None
    checkpoint = out / "model.ckpt" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = LossLog(out / "loss.csv", resume=resume) if out is not None else None

    history: list[StepLoss] = []
    channels, dtype = model.cfg.in_channels, model.dtype
    try:
        for epoch in range(optimizer.step // per_epoch, options.epochs):
            order = epoch_order(len(dataset), epoch, options.seed)
            done = optimizer.step - epoch * per_epoch
            order = order[done * options.batch_size:]
            epoch_losses = []
            for images, truth in iter_batches(dataset, order, options.batch_size, channels, dtype):
                lr = scheduled_lr(optimizer.step, total_steps, options.lr, options.warmup_steps)
                try:
                    loss = train_step(model, images, truth, optimizer, lr)
                except NumericError as err:
                    logger.error("step %d diverged: %s", optimizer.step + 1, err)
                    raise
                history.append(loss)
                epoch_losses.append(loss.total)
                if log is not None:
                    log.write(loss)
                logger.debug("step %d lr=%.6f loss=%.5f (cls %.5f box %.5f)",
                             loss.step, loss.lr, loss.total, loss.cls, loss.box)
            if epoch_losses:
                logger.info("epoch %d/%d: mean loss %.5f over %d steps",
                            epoch + 1, options.epochs, float(np.mean(epoch_losses)), len(epoch_losses))
            if checkpoint is not None:
                save_checkpoint(model, checkpoint, optimizer)
    finally:
        if log is not None:
            log.close()
    return TrainResult(tuple(history), optimizer, checkpoint)


def overfit(
    model: RSNet,
    pixels: np.ndarray,
    boxes: Sequence[GroundTruthBox],
    steps: int = 200,
    lr: float = LR,
) -> TrainResult:
    """Fit a single image repeatedly at a constant learning rate (training sanity run)."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    optimizer = OptimizerState(lr=lr)
    images = as_batch(pixels, model.cfg.in_channels, model.dtype)
    history = [train_step(model, images, [list(boxes)], optimizer, lr) for _ in range(steps)]
    result = TrainResult(tuple(history), optimizer, None)
    logger.info("overfit %d steps: loss %.5f -> %.5f, falling on %.0f%% of steps",
                steps, result.first_loss, result.last_loss, 100 * result.falling_fraction)
    return result
