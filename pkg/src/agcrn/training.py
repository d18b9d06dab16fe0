"""L1 objective, Adam, and the early-stopping training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    absolute,
    as_tensor,
    make_rng,
    mean_all,
    no_grad,
    sub,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.003
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    loss_scale: str = "mean"

    def __post_init__(self):
        if self.loss_scale != "mean":
            raise ValueError(f"unsupported loss_scale {self.loss_scale!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0 or self.lr < 0:
            raise ValueError(f"invalid training config {self}")


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error over every element (horizons, nodes and batch)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return mean_all(absolute(sub(pred, target)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place, then reset gradients to zero.

    A parameter whose ``grad`` is None is treated as having zero gradient.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 0.003):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_loss(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss

    def to_csv(self, path, include_seconds: bool = True) -> None:
        """Write one row per epoch; floats use repr so the file is exact."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["epoch", "train_loss", "val_loss"] + (["seconds"] if include_seconds else [])
            w.writerow(header)
            for r in self.records:
                row = [r.epoch, repr(r.train_loss), repr(r.val_loss)]
                if include_seconds:
                    row.append(f"{r.seconds:.3f}")
                w.writerow(row)


def _denormalize(pred: Tensor, normalizer) -> Tensor:
    if normalizer is None:
        return pred
    return pred * float(normalizer.std_) + float(normalizer.mean_)


def predict_windows(model, inputs: np.ndarray, normalizer=None, batch_size: int = 64) -> np.ndarray:
    """Forecasts in original units for a stack of windows, ``W x tau x N``."""
    out = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            out.append(_denormalize(model.forward(inputs[i:i + batch_size]), normalizer).data)
    if not out:
        return np.zeros((0, model.config.horizon, model.config.n_nodes))
    return np.concatenate(out, axis=0)


def evaluate_loss(model, inputs: np.ndarray, targets: np.ndarray, normalizer=None,
                  batch_size: int = 64) -> float:
    pred = predict_windows(model, inputs, normalizer, batch_size)
    return float(np.mean(np.abs(pred - targets)))


def train(model, dataset, config: TrainConfig | None = None):
    """Fit ``model`` on ``dataset.train`` with early stopping on ``dataset.val``.

    Returns the model (holding the best-validation parameters) and the
    per-epoch history.
    """
    config = config or TrainConfig()
    tr, va = dataset.train, dataset.val
    if len(tr) == 0 or len(va) == 0:
        raise TrainingError(f"empty split: {len(tr)} train / {len(va)} validation windows")
    norm = dataset.normalizer
    params = model.trainable_parameters()
    state = AdamState()
    rng = make_rng(config.seed)
    history = TrainHistory()
    best_val = np.inf
    best_params = {p.name: p.data.copy() for p in params}
    stale = 0
    for p in params:
        p.zero_grad()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                pred = _denormalize(model.forward(tr.inputs[idx]), norm)
                loss = l1_loss(pred, tr.targets[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {bi}: {exc}") from exc
            total += loss.item() * len(idx)
            adam_step(params, state, config.lr)
        train_loss = total / len(tr)
        val_loss = evaluate_loss(model, va.inputs, va.targets, norm, config.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        seconds = time.perf_counter() - t0
        history.records.append(EpochRecord(epoch, train_loss, val_loss, seconds))
        log.info("epoch %d train %.6f val %.6f (%.2fs)", epoch, train_loss, val_loss, seconds)
        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            best_params = {p.name: p.data.copy() for p in params}
            stale = 0
        else:
            stale += 1
            if stale >= max(config.patience, 1):
                log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break

    for p in params:
        p.data[...] = best_params[p.name]
    return model, history
