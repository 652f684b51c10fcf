"""SGD with momentum, plateau learning-rate decay, and the epoch loop."""

import csv
import dataclasses
import logging

import numpy as np

from .evaluation import auc_mann_whitney
from .layers import bce_loss
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 8
    plateau_patience: int = 10
    min_delta: float = 1e-4
    lr_factor: float = 0.1
    cooldown: int = 0
    min_lr: float = 1e-6
    max_epochs: int = 100
    seed: int = 0
    class_weights: tuple = None
    eval_batch_size: int = 32

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place update ``v <- m*v - lr*(g + wd*w); w <- w + v`` (coupled decay).

    ``params``, ``grads`` and ``velocity`` are dicts keyed alike; missing
    velocity entries start at zero.
    """
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= w.dtype.type(momentum)
        v -= w.dtype.type(lr) * (g + w.dtype.type(weight_decay) * w)
        w += v


class PlateauScheduler:
    """Divide the learning rate by ``1/factor`` after ``patience`` epochs without improvement.

    An epoch improves when the monitored value drops below the best seen so
    far by more than ``min_delta``. A reduction resets the bad-epoch
    counter; during ``cooldown`` epochs after a reduction bad epochs are not
    counted.
    """

    def __init__(self, lr0, patience=10, factor=0.1, min_delta=1e-4, cooldown=0):
        self.lr = lr0
        self.patience, self.factor = patience, factor
        self.min_delta, self.cooldown = min_delta, cooldown
        self.best = np.inf
        self.bad = 0
        self.cooling = 0

    def step(self, value):
        if value < self.best - self.min_delta:
            self.best = value
            self.bad = 0
        elif self.cooling > 0:
            self.cooling -= 1
        else:
            self.bad += 1
        if self.bad >= self.patience:
            self.lr *= self.factor
            self.bad = 0
            self.cooling = self.cooldown
        return self.lr


def plateau_lr(history, lr0, patience=10, factor=0.1, min_delta=1e-4, cooldown=0):
    """Learning rate after replaying a per-epoch history of monitored values."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    sched = PlateauScheduler(lr0, patience, factor, min_delta, cooldown)
    for v in history:
        sched.step(v)
    return sched.lr


@dataclasses.dataclass
class TrainResult:
    state: dict
    best_epoch: int
    history: list


def evaluate_set(net, X, y, batch_size=32):
    """Eval-mode ``(loss, auc, p_pca)``; AUC is NaN when ``y`` holds one class."""
    probs = net.predict_proba(X, batch_size)
    loss, _ = bce_loss(probs, y)
    auc = auc_mann_whitney(probs[:, 1], y) if 0 < y.sum() < len(y) else float("nan")
    return loss, auc, probs[:, 1]


def derived_seeds(seed):
    """Independent (init, shuffle, dropout) seeds from one integer."""
    kids = np.random.SeedSequence(seed).spawn(3)
    return [int(k.generate_state(1)[0]) for k in kids]


def train(net, train_set, val_set, cfg, log_path=None):
    """Train ``net`` in place; returns the best-validation-loss state.

    ``train_set`` and ``val_set`` are ``(X, y)`` pairs with ``X`` of shape
    ``(N, 6, 66, 66)``. With ``max_epochs == 0`` the initial weights are
    returned.
    """
    Xtr, ytr = train_set
    Xva, yva = val_set
    _, shuffle_seed, dropout_seed = derived_seeds(cfg.seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    net.seed_dropout(dropout_seed)
    params = net.named_params()
    velocity = {}
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.lr_factor, cfg.min_delta, cfg.cooldown)
    best_state, best_loss, best_epoch = net.state_dict(), np.inf, 0
    history = []
    cw = None if cfg.class_weights is None else tuple(cfg.class_weights)
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = shuffle_rng.permutation(len(Xtr))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, _ = net.loss_and_backward(Xtr[idx], ytr[idx], cw)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size}")
            sgd_step(params, net.named_grads(), velocity, lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss, val_auc, _ = evaluate_set(net, Xva, yva, cfg.eval_batch_size)
        if not np.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "val_auc": val_auc, "lr": lr})
        log.info("epoch %d train_loss %.5f val_loss %.5f val_auc %.4f lr %.2e",
                 epoch, train_loss, val_loss, val_auc, lr)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, net.state_dict()
        if sched.step(val_loss) < cfg.min_lr:
            break
    net.load_state_dict(best_state)
    if log_path is not None:
        write_metrics_csv(log_path, history)
    return TrainResult(best_state, best_epoch, history)


METRIC_FIELDS = ("epoch", "train_loss", "val_loss", "val_auc", "lr")


def write_metrics_csv(path, history, comment=None):
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def read_metrics_csv(path):
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(line for line in f if not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in zip(header, r)} for r in body]
