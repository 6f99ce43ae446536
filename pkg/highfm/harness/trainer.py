"""
Training loops
Masked pretraining, fine-tuning with best-checkpoint selection, and evaluation
"""

import logging
import math
from typing import Any, Callable, Dict, List, Literal, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from highfm import config
from highfm.datapipe.loader import Prefetcher, iterate_batches
from highfm.datapipe.scenes import PatchSample
from highfm.encodings import Timestamp
from highfm.errors import ConfigError, ContractError, UndefinedMetricError
from highfm.harness.optim import Adam, AdamConfig, cosine_lr
from highfm.mae.mae_model import MaskedAutoencoder, make_pretrain_batch, pretrain_step
from highfm.metrics import MONITOR_ALIASES, ConfusionMatrix, compute_metrics, confusion
from highfm.numerics.tensor import backward, no_grad
from highfm.segmentation.augment import augment_batch
from highfm.segmentation.losses import segmentation_loss
from highfm.segmentation.seg_head import MONITOR_FOR_LOSS, SegmentationModel

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """One training run. Defaults are the fine-tuning hyperparameters."""

    seed: int = 0
    loss_kind: Literal["weighted_ce", "dice"] = "weighted_ce"
    class_weights: Tuple[float, float] = (1.0, 1.0)
    augment: bool = False
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    lr: float = Field(default=config.LEARNING_RATE, gt=0)
    lr_min: float = Field(default=0.0, ge=0)
    max_epochs: int = Field(default=config.MAX_EPOCHS, ge=1)
    max_steps: Optional[int] = Field(default=None, ge=1)
    monitor: Optional[Literal["balanced_accuracy", "positive_iou"]] = None
    scheduler_horizon: Optional[int] = Field(default=None, ge=1)
    betas: Tuple[float, float] = config.ADAM_BETAS
    adam_eps: float = config.ADAM_EPS
    weight_decay: float = 0.0
    prefetch: int = Field(default=config.PREFETCH_BATCHES, ge=1)

    @model_validator(mode="after")
    def _monitor_matches_loss(self) -> "RunConfig":
        expected = MONITOR_FOR_LOSS[self.loss_kind]
        if self.monitor is None:
            self.monitor = expected
        elif self.monitor != expected:
            raise ConfigError(f"loss {self.loss_kind} is monitored with {expected}, not {self.monitor}")
        if min(self.class_weights) <= 0:
            raise ConfigError(f"class weights must be positive, got {self.class_weights}")
        return self

    def adam_config(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, betas=self.betas, eps=self.adam_eps, weight_decay=self.weight_decay)

    def horizon(self, steps_per_epoch: int) -> int:
        if self.scheduler_horizon:
            return self.scheduler_horizon
        total = self.max_epochs * steps_per_epoch
        return min(total, self.max_steps) if self.max_steps else total


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_images: int
    confusion: Dict[str, int]
    metrics: Dict[str, float]
    per_image: Optional[List[Dict[str, float]]] = None


class FitResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    best_epoch: int
    best_value: float
    monitor: str
    best_state: Dict[str, np.ndarray]
    history: List[Dict[str, Any]]


class PretrainResult(BaseModel):
    step_losses: List[float]
    history: List[Dict[str, Any]]


class MaskPredictor(Protocol):
    def predict(self, inputs: np.ndarray, timestamps: Sequence[Sequence[Timestamp]]) -> np.ndarray: ...


def _rngs(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    # Separate streams: shuffling runs on the prefetch thread.
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def _batches(samples: Sequence[PatchSample], run: RunConfig, rng: Optional[np.random.Generator]) -> Prefetcher:
    return Prefetcher(iterate_batches(samples, run.batch_size, rng), capacity=run.prefetch)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def validation_recon_loss(model: MaskedAutoencoder, samples: Sequence[PatchSample], run: RunConfig) -> Optional[float]:
    """Mean masked reconstruction loss with masks drawn from a fixed stream."""
    if not samples:
        return None
    mask_rng = np.random.default_rng([run.seed, 3])
    total, count = 0.0, 0
    model.eval()
    with no_grad():
        for batch in iterate_batches(samples, run.batch_size):
            pb = make_pretrain_batch(batch.inputs, batch.timestamps, model.cfg, mask_rng)
            loss, _ = model.forward_loss(pb)
            total += loss.item() * len(batch)
            count += len(batch)
    model.train()
    return total / count


def pretrain(
    model: MaskedAutoencoder,
    train: Sequence[PatchSample],
    run: RunConfig,
    val: Sequence[PatchSample] = (),
) -> PretrainResult:
    """Masked-reconstruction training with cosine annealing; validation loss after every epoch."""
    if not train:
        raise ContractError("pretraining needs at least one sample")
    if any(s.timesteps != model.cfg.timesteps for s in train):
        raise ContractError(f"model expects {model.cfg.timesteps} timesteps per sample")
    shuffle_rng, mask_rng = _rngs(run.seed)
    steps_per_epoch = math.ceil(len(train) / run.batch_size)
    horizon = run.horizon(steps_per_epoch)
    optimizer = Adam(model, run.adam_config())
    model.train()

    step_losses: List[float] = []
    history: List[Dict[str, Any]] = []
    step = 0
    for epoch in range(1, run.max_epochs + 1):
        epoch_losses = []
        for batch in _batches(train, run, shuffle_rng):
            optimizer.lr = cosine_lr(min(step, horizon), horizon, run.lr, run.lr_min)
            pb = make_pretrain_batch(batch.inputs, batch.timestamps, model.cfg, mask_rng)
            loss = pretrain_step(pb, model, optimizer)
            epoch_losses.append(loss)
            step += 1
            if run.max_steps and step >= run.max_steps:
                break
        step_losses.extend(epoch_losses)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": validation_recon_loss(model, val, run),
            "lr": optimizer.lr,
        }
        history.append(record)
        logger.info(f"pretrain epoch {epoch}: train_loss={record['train_loss']:.5f} val_loss={record['val_loss']}")
        if run.max_steps and step >= run.max_steps:
            break
    return PretrainResult(step_losses=step_losses, history=history)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def evaluate(
    model: MaskPredictor,
    samples: Sequence[PatchSample],
    batch_size: int = config.BATCH_SIZE,
    metric_names: Optional[Sequence[str]] = None,
    per_image: bool = False,
) -> EvalReport:
    """Accumulate one confusion matrix over the split, then compute metrics from it."""
    if any(s.label is None for s in samples):
        raise ContractError("evaluation needs labeled samples")
    if hasattr(model, "eval"):
        model.eval()
    total = ConfusionMatrix()
    rows: List[Dict[str, float]] = []
    for batch in iterate_batches(samples, batch_size):
        pred = model.predict(batch.inputs, batch.timestamps)
        for p, t in zip(pred, batch.labels):
            cm = confusion(p, t)
            total = total + cm
            if per_image:
                rows.append(cm.to_dict())
    return EvalReport(
        n_images=len(samples),
        confusion=total.to_dict(),
        metrics=compute_metrics(total, metric_names),
        per_image=rows if per_image else None,
    )


def train_epoch(
    model: SegmentationModel,
    train: Sequence[PatchSample],
    run: RunConfig,
    optimizer: Adam,
    shuffle_rng: np.random.Generator,
    aug_rng: np.random.Generator,
    lr_at: Callable[[], float],
    max_batches: Optional[int] = None,
) -> float:
    model.train()
    losses = []
    for batch in _batches(train, run, shuffle_rng):
        if max_batches is not None and len(losses) >= max_batches:
            break
        inputs, labels = batch.inputs, batch.labels
        if run.augment:
            inputs, labels = augment_batch(inputs, labels, aug_rng)
        optimizer.lr = lr_at()
        model.zero_grad()
        logits = model(inputs, batch.timestamps)
        loss = segmentation_loss(logits, labels, run.loss_kind, run.class_weights, model.seg_cfg.dice_eps)
        backward(loss)
        optimizer.step()
        losses.append(loss.item())
        logger.debug(f"step loss={losses[-1]:.6f} lr={optimizer.lr:.3g}")
    return float(np.mean(losses))


EvaluateFn = Callable[[SegmentationModel, int], Dict[str, float]]


def fit(
    run: RunConfig,
    model: SegmentationModel,
    train: Sequence[PatchSample],
    val: Sequence[PatchSample],
    evaluate_fn: Optional[EvaluateFn] = None,
) -> FitResult:
    """
    Train for max_epochs and keep the checkpoint with the best validation monitor.

    Ties keep the earlier epoch. An undefined monitor on the validation split
    aborts the run. With max_steps set, training stops after that many optimizer
    steps, possibly mid-epoch.
    """
    if not train:
        raise ContractError("fine-tuning needs at least one training sample")
    shuffle_rng, aug_rng = _rngs(run.seed)
    steps_per_epoch = math.ceil(len(train) / run.batch_size)
    horizon = run.horizon(steps_per_epoch)
    optimizer = Adam(model, run.adam_config())
    monitor_key = MONITOR_ALIASES[run.monitor]

    step = 0

    def lr_at() -> float:
        nonlocal step
        lr = cosine_lr(min(step, horizon), horizon, run.lr, run.lr_min)
        step += 1
        return lr

    best_value: Optional[float] = None
    best_epoch = 0
    best_state: Dict[str, np.ndarray] = {}
    history: List[Dict[str, Any]] = []
    for epoch in range(1, run.max_epochs + 1):
        remaining = run.max_steps - step if run.max_steps else None
        train_loss = train_epoch(model, train, run, optimizer, shuffle_rng, aug_rng, lr_at, remaining)
        try:
            if evaluate_fn is not None:
                metrics = evaluate_fn(model, epoch)
            else:
                metrics = evaluate(model, val, run.batch_size).metrics
            value = metrics[monitor_key]
        except UndefinedMetricError as e:
            raise UndefinedMetricError(f"epoch {epoch}: validation {run.monitor} is undefined ({e})") from e

        if best_value is None or value > best_value:
            best_value, best_epoch, best_state = value, epoch, model.state_dict()
        history.append({"epoch": epoch, "train_loss": train_loss, "lr": optimizer.lr, **metrics})
        logger.info(
            f"epoch {epoch}: loss={train_loss:.5f} {run.monitor}={value:.4f} (best {best_value:.4f} @ {best_epoch})"
        )
        if run.max_steps and step >= run.max_steps:
            logger.info(f"stopping after {step} steps (max_steps={run.max_steps})")
            break

    return FitResult(
        best_epoch=best_epoch,
        best_value=best_value,
        monitor=run.monitor,
        best_state=best_state,
        history=history,
    )
