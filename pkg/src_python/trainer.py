"""
Mini-batch training loop for `nn.Network`: shuffling, smoothed BCE, L2,
global-norm clipping, Adam, plateau learning-rate schedule and early
stopping with best-weight restore.
"""

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import TrainConfig
from errors import DivergedTraining, TooFewWindows
from logger import logger
from nn import (
    AdamState,
    Network,
    ReduceLROnPlateau,
    adam_step,
    bce_smoothed,
    clip_global_norm,
    early_stop,
    l2_penalty,
)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float]
    val_accuracy: Optional[float]
    grad_norm: float

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainResult:
    stage: str
    history: List[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def to_dict(self) -> Dict:
        return {
            "stage": self.stage,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs_run": self.epochs_run,
            "seconds": round(self.seconds, 3),
            "history": [h.to_dict() for h in self.history],
        }


def predict_batches(net: Network, x: np.ndarray, batch_size: int, start: int = 0) -> np.ndarray:
    """Eval-mode probabilities for every row of `x`, shape (N,)."""
    out = []
    for i in range(0, len(x), batch_size):
        out.append(net.forward(x[i:i + batch_size], training=False, start=start).reshape(-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=net.dtype)


def loss_and_accuracy(probs: np.ndarray, y: np.ndarray, epsilon: float) -> Tuple[float, float]:
    loss, _ = bce_smoothed(probs, y, epsilon)
    accuracy = float(np.mean((probs >= 0.5) == (y >= 0.5)))
    return loss, accuracy


def train_network(
    net: Network,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: Optional[np.ndarray],
    y_val: Optional[np.ndarray],
    cfg: TrainConfig,
    stage: str = "train",
    fold: Optional[int] = None,
    start: int = 0,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> TrainResult:
    """
    Fit the trainable parameters of layers [start, end) on (x_train, y_train).

    The monitored metric drives both the plateau schedule and early stopping;
    without validation data the training loss is monitored instead. On return
    the network holds the weights of the best monitored epoch.
    """
    if len(x_train) == 0:
        raise TooFewWindows(f"No training examples for stage {stage}")
    has_val = x_val is not None and len(x_val) > 0
    monitor = cfg.monitor if has_val else "train_loss"
    mode = "max" if monitor == "val_accuracy" else "min"

    params = [p for p in net.parameters(start) if p.trainable]
    adam = AdamState.for_params(params)
    scheduler = ReduceLROnPlateau(cfg.learning_rate, cfg.plateau_patience, cfg.plateau_factor,
                                  mode, cfg.plateau_min_delta, cfg.min_lr)
    rng = np.random.default_rng(cfg.seed)
    y_train = np.asarray(y_train, dtype=net.dtype)

    result = TrainResult(stage=stage)
    monitored: List[float] = []
    best_state = net.state_dict()
    lr = cfg.learning_rate
    t0 = time.perf_counter()

    logger.info(f"[{stage}] training {sum(p.size for p in params)} parameters on {len(x_train)} examples "
                f"(val {len(x_val) if has_val else 0}), batch {cfg.batch_size}, lr {lr:g}, monitor {monitor}")

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(x_train))
        total_loss = 0.0
        correct = 0
        grad_norm = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            probs = net.forward(xb, training=True, start=start).reshape(-1)
            loss, grad = bce_smoothed(probs, yb, cfg.label_smoothing)
            if not math.isfinite(loss):
                raise DivergedTraining(fold, epoch)
            for p in params:
                p.zero_grad()
            net.backward(grad.reshape(-1, 1), start=start)
            l2_penalty(params, cfg.l2_lambda)
            grad_norm = clip_global_norm(params, cfg.grad_clip_norm)
            if not math.isfinite(grad_norm):
                raise DivergedTraining(fold, epoch)
            adam_step(params, adam, lr)
            total_loss += loss * len(idx)
            correct += int(np.sum((probs >= 0.5) == (yb >= 0.5)))

        train_loss = total_loss / len(x_train)
        train_acc = correct / len(x_train)
        val_loss = val_acc = None
        if has_val:
            val_loss, val_acc = loss_and_accuracy(predict_batches(net, x_val, cfg.batch_size, start),
                                                  np.asarray(y_val), cfg.label_smoothing)
            if not math.isfinite(val_loss):
                raise DivergedTraining(fold, epoch)

        entry = EpochLog(epoch, lr, train_loss, train_acc, val_loss, val_acc, grad_norm)
        result.history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        logger.info(
            f"[{stage}] epoch {epoch} lr={lr:.2e} loss={train_loss:.4f} acc={train_acc:.4f}"
            + (f" val_loss={val_loss:.4f} val_acc={val_acc:.4f}" if has_val else "")
        )

        value = {"val_loss": val_loss, "val_accuracy": val_acc, "train_loss": train_loss}[monitor]
        monitored.append(value)
        best_index, stop = early_stop(monitored, cfg.early_stop_patience, mode)
        if best_index == epoch:
            best_state = net.state_dict()
        if stop:
            result.stopped_early = True
            logger.info(f"[{stage}] early stop at epoch {epoch}, best epoch {best_index}")
            break

        new_lr = scheduler.step(value)
        if new_lr != lr:
            logger.info(f"[{stage}] {monitor} plateaued, learning rate {lr:.2e} -> {new_lr:.2e}")
            lr = new_lr

    result.best_epoch, _ = early_stop(monitored, cfg.early_stop_patience, mode)
    net.load_state_dict(best_state)
    result.seconds = time.perf_counter() - t0
    logger.info(f"[{stage}] done after {result.epochs_run} epochs in {result.seconds:.1f}s, "
                f"restored epoch {result.best_epoch}")
    return result
