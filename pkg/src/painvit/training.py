"""Losses, optimizer, learning-rate schedule, training loop, and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .augment import AugmentConfig, policy_stack
from .errors import ConfigurationError, DataError, DimensionError, StateError
from .model import PainViT
from .numerics import Tensor


@dataclass
class TrainConfig:
    lr: float = 2e-5
    schedule: str = "cosine"
    weight_decay: float = 0.1
    epochs: int = 100
    warmup_epochs: int = 10
    cooldown_epochs: int = 10
    batch_size: int = 32
    label_smoothing: float = 0.0
    dropout: float = 0.0
    lr_floor_ratio: float = 0.01  # cosine decays to lr / 100
    steps_per_epoch: int = 1

    def validate(self):
        if self.warmup_epochs + self.cooldown_epochs > self.epochs:
            raise ConfigurationError(
                f"warmup ({self.warmup_epochs}) + cooldown ({self.cooldown_epochs}) "
                f"exceed total epochs ({self.epochs})"
            )
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(
                f"label smoothing must be in [0, 1), got {self.label_smoothing}"
            )
        if self.lr <= 0.0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "schedule": self.schedule,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "cooldown_epochs": self.cooldown_epochs,
            "batch_size": self.batch_size,
            "label_smoothing": self.label_smoothing,
            "dropout": self.dropout,
        }

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        cfg = TrainConfig(**data)
        cfg.validate()
        return cfg


# -- losses ----------------------------------------------------------------------


def ce_label_smoothing(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy against smoothed one-hot targets, averaged over the batch.

    The true class receives 1 - smoothing; the remaining mass is spread
    uniformly over the other classes (smoothing / (C - 1) each).
    """
    if not 0.0 <= smoothing < 1.0:
        raise ConfigurationError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets, dtype=np.int64)
    batch, classes = logits.shape
    if targets.shape != (batch,):
        raise DataError(f"targets shape {targets.shape} does not match batch {batch}")
    if targets.min() < 0 or targets.max() >= classes:
        raise DataError(
            f"target index out of range for {classes} classes: "
            f"[{targets.min()}, {targets.max()}]"
        )
    weights = np.full((batch, classes), smoothing / (classes - 1) if classes > 1 else 0.0)
    weights[np.arange(batch), targets] = 1.0 - smoothing
    log_probs = nx.log_softmax(logits, axis=1)
    return nx.tensor_sum(log_probs * Tensor(-weights / batch))


@dataclass
class MultiTaskLossState:
    """Learnable per-task weights and the per-task losses for one step."""

    weights: Tensor
    task_losses: list = field(default_factory=list)

    @staticmethod
    def create(num_tasks: int) -> "MultiTaskLossState":
        if num_tasks < 1:
            raise ConfigurationError(f"need at least one task, got {num_tasks}")
        return MultiTaskLossState(Tensor(np.zeros(num_tasks), requires_grad=True))

    @property
    def num_tasks(self) -> int:
        return self.weights.data.size


def multitask_loss(state: MultiTaskLossState, uncertainty_sign: int = +1) -> Tensor:
    """Total loss with exponentially weighted tasks: sum of e^{s*w_i} L_i + w_i.

    ``uncertainty_sign=+1`` is the default form; ``-1`` selects the variant
    where large weights attenuate a task instead of amplifying it.  Gradients
    flow both to the weights and through each task loss.
    """
    if uncertainty_sign not in (+1, -1):
        raise ConfigurationError(f"uncertainty_sign must be +1 or -1, got {uncertainty_sign}")
    if len(state.task_losses) != state.num_tasks:
        raise StateError(
            f"{state.num_tasks} tasks configured but {len(state.task_losses)} losses set"
        )
    total = None
    for i, task_loss in enumerate(state.task_losses):
        if task_loss is None:
            raise StateError(f"task {i} loss missing")
        w_i = state.weights[i]
        scaled = nx.exp(w_i * float(uncertainty_sign)) * task_loss + w_i
        total = scaled if total is None else total + scaled
    return total


# -- schedule and optimizer ---------------------------------------------------------


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate for a global step: linear warmup from zero, cosine decay
    to lr * lr_floor_ratio, then a constant floor through the cooldown."""
    spe = max(1, config.steps_per_epoch)
    warmup_steps = config.warmup_epochs * spe
    cooldown_steps = config.cooldown_epochs * spe
    total_steps = config.epochs * spe
    floor = config.lr * config.lr_floor_ratio
    if warmup_steps > 0 and step < warmup_steps:
        return config.lr * step / warmup_steps
    decay_end = total_steps - cooldown_steps
    if step >= decay_end:
        return floor
    span = max(1, decay_end - warmup_steps)
    progress = (step - warmup_steps) / span
    return floor + (config.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: dict,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay adaptive step, updating params in place.

    Weight decay multiplies parameters by (1 - lr * wd) before the
    bias-corrected moment update.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    t = state.get("t", 0) + 1
    state["t"] = t
    if "m" not in state:
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} does not match param {p.data.shape}")
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a parameter list."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self, lr: float) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adamw_step(self.params, grads, self.state, lr, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- metrics ----------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray

    def as_row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    """Macro metrics from a [true, predicted] count matrix.

    Classes with an empty denominator (no support or no predictions)
    contribute zero to their macro average.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    classes = confusion.shape[0]
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    actual = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros(classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(classes), where=actual > 0)
    pr_sum = precision + recall
    f1 = np.divide(2 * precision * recall, pr_sum, out=np.zeros(classes), where=pr_sum > 0)
    return Metrics(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=confusion,
    )


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return confusion


def predict(model: PainViT, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Argmax class per image, ties broken toward the lowest index."""
    if not model.bn_initialized():
        raise StateError("model normalization statistics are uninitialized")
    outputs = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            batch = Tensor(np.asarray(images[start : start + batch_size], dtype=np.float64))
            _, logits = model.forward(batch, training=False)
            outputs.append(np.argmax(logits.data, axis=1))
    return np.concatenate(outputs)


def evaluate(model: PainViT, images, labels, batch_size: int = 32) -> Metrics:
    """Accumulate a confusion matrix over the dataset and derive macro metrics."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("cannot evaluate an empty dataset")
    predictions = predict(model, images, batch_size)
    confusion = confusion_matrix(labels, predictions, model.config.num_classes)
    return metrics_from_confusion(confusion)


# -- training loop ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val: Optional[Metrics]


def train(
    model: PainViT,
    train_images,
    train_labels,
    config: TrainConfig,
    rng: np.random.Generator,
    augment: Optional[AugmentConfig] = None,
    val_images=None,
    val_labels=None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
):
    """Mini-batch training of the classifier on a stack of images.

    Shuffling, augmentation, and dropout all draw from ``rng``, so a fixed
    seed reproduces the loss curve and the final parameters bit for bit.
    Returns (history, best_state) where ``best_state`` holds copies of the
    parameters and normalization statistics at the best validation accuracy
    (final state when no validation split is given).
    """
    config.validate()
    train_labels = np.asarray(train_labels, dtype=np.int64)
    n = len(train_images)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    config.steps_per_epoch = steps_per_epoch
    optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay)
    history: list = []
    best_accuracy = -1.0
    best_state = None
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            chosen = order[start : start + config.batch_size]
            batch = np.stack(
                [
                    policy_stack(np.asarray(train_images[i], dtype=np.float64), augment, rng)
                    if augment is not None
                    else np.asarray(train_images[i], dtype=np.float64)
                    for i in chosen
                ]
            )
            lr = lr_at(step, config)
            optimizer.zero_grad()
            _, logits = model.forward(Tensor(batch), training=True, rng=rng)
            loss = ce_label_smoothing(logits, train_labels[chosen], config.label_smoothing)
            loss.backward()
            optimizer.step(lr)
            epoch_loss += float(loss.data) * len(chosen)
            step += 1
        record = EpochRecord(epoch=epoch, lr=lr_at(step - 1, config), train_loss=epoch_loss / n, val=None)
        if val_images is not None and len(val_images):
            record.val = evaluate(model, val_images, val_labels, config.batch_size)
            if record.val.accuracy > best_accuracy:
                best_accuracy = record.val.accuracy
                best_state = snapshot_state(model)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    if best_state is None:
        best_state = snapshot_state(model)
    return history, best_state


def snapshot_state(model: PainViT) -> dict:
    return {
        "params": {name: p.data.copy() for name, p in model.named_parameters()},
        "stats": {
            name: (s.mean.copy(), s.var.copy(), s.initialized)
            for name, s in model.named_stats()
        },
    }


def restore_state(model: PainViT, state: dict) -> None:
    for name, p in model.named_parameters():
        p.data = state["params"][name].copy()
    for name, s in model.named_stats():
        mean, var, initialized = state["stats"][name]
        s.mean = mean.copy()
        s.var = var.copy()
        s.initialized = initialized
