"""Losses, Adam, early stopping and the minibatch training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

CLAMP = 1e-7


class NumericalError(FloatingPointError):
    pass


def _check_labels(y):
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")


def _mask_weights(shape, mask):
    """Per-element weights broadcast from a (N, T) frame mask, plus their sum."""
    if mask is None:
        w = np.ones(shape[:-1])
    else:
        w = np.asarray(mask, dtype=np.float64).reshape(shape[:-1])
    return w[..., None], w.sum()


def bce_loss(y_hat: np.ndarray, y: np.ndarray, mask=None, clamp: float = CLAMP):
    """Mean binary cross-entropy over all valid (frame, class) elements.

    Returns ``(loss, d_loss/d_y_hat)``.  Predictions are clamped to
    ``[clamp, 1 - clamp]``; the gradient is evaluated at the clamped value.
    """
    _check_labels(y)
    p = np.clip(y_hat, clamp, 1.0 - clamp)
    w, n_frames = _mask_weights(y_hat.shape, mask)
    count = n_frames * y_hat.shape[-1]
    if count == 0:
        raise ValueError("no valid elements in loss")
    ll = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    loss = -float((ll * w).sum() / count)
    grad = w * (p - y) / (p * (1.0 - p)) / count
    return loss, grad


def categorical_ce_loss(y_hat: np.ndarray, y: np.ndarray, mask=None, clamp: float = CLAMP):
    """Mean over valid frames of ``-sum_c y log y_hat`` (softmax outputs)."""
    _check_labels(y)
    p = np.clip(y_hat, clamp, 1.0)
    w, count = _mask_weights(y_hat.shape, mask)
    if count == 0:
        raise ValueError("no valid frames in loss")
    loss = -float((w * y * np.log(p)).sum() / count)
    grad = -w * y / p / count
    return loss, grad


LOSSES = {"sigmoid": bce_loss, "softmax": categorical_ce_loss}


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of every array in ``params``."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class EarlyStopper:
    """Stops once ``patience`` epochs pass without a strictly lower validation loss."""

    patience: int = 30
    best_loss: float = float("inf")
    best_epoch: int = -1
    epochs_since_best: int = 0
    best_state: dict | None = field(default=None, repr=False)

    def update(self, epoch: int, val_loss: float, state: Callable[[], dict] | None = None) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.epochs_since_best = 0
            if state is not None:
                self.best_state = state()
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    patience: int = 30
    max_epochs: int = 300
    seed: int = 0
    clamp: float = CLAMP


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_loss: float
    log: list[dict]
    stopped_early: bool


def _stack(items):
    x = np.stack([it.features for it in items])
    y = np.stack([it.labels for it in items])
    m = np.stack([it.mask for it in items])
    return x, y, m


def dataset_loss(model, items, loss_fn, batch_size: int = 16, clamp: float = CLAMP) -> float:
    """Inference-mode loss averaged over all valid elements of ``items``."""
    was = model.training
    model.eval()
    total = 0.0
    weight = 0.0
    for i in range(0, len(items), batch_size):
        x, y, m = _stack(items[i : i + batch_size])
        loss, _ = loss_fn(model.forward(x), y, m, clamp)
        w = m.sum()
        total += loss * w
        weight += w
    model.train(was)
    return total / weight


def train(model, train_items, val_items, cfg: TrainConfig, log_path=None,
          val_fn: Callable | None = None) -> TrainResult:
    """Minibatch Adam with per-epoch validation and early stopping.

    Returns the parameters (and BN statistics) of the epoch with the lowest
    validation loss.  ``val_fn(model, epoch)`` overrides the validation loss.
    """
    if not train_items:
        raise ValueError("empty training split")
    if not val_items and val_fn is None:
        raise ValueError("empty validation split")
    loss_fn = LOSSES[model.cfg.activation]
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    stopper = EarlyStopper(cfg.patience)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    params = model.parameters()
    grads = model.gradients()
    records = []
    sink = open(log_path, "w") if log_path else None
    stopped = False
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = shuffle_rng.permutation(len(train_items))
            total = weight = 0.0
            for b in range(0, len(order), cfg.batch_size):
                x, y, m = _stack([train_items[i] for i in order[b : b + cfg.batch_size]])
                model.zero_grad()
                y_hat = model.forward(x, y)
                loss, dy = loss_fn(y_hat, y, m, cfg.clamp)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b // cfg.batch_size}")
                model.backward(dy)
                opt.step(params, grads)
                total += loss * m.sum()
                weight += m.sum()
            train_loss = total / weight
            if val_fn is not None:
                val_loss = float(val_fn(model, epoch))
            else:
                val_loss = dataset_loss(model, val_items, loss_fn, cfg.batch_size, cfg.clamp)
            if not np.isfinite(val_loss):
                raise NumericalError(f"non-finite validation loss at epoch {epoch}")
            rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                   "wall_time": time.perf_counter() - t0, "seed": cfg.seed}
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
            if stopper.update(epoch, val_loss, model.state_dict):
                stopped = True
                break
    finally:
        if sink:
            sink.close()
    return TrainResult(stopper.best_state, stopper.best_epoch, stopper.best_loss, records, stopped)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
