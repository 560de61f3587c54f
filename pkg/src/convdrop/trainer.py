"""SGD with Nesterov momentum, step learning-rate decay, softmax
cross-entropy and a deterministic epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .data import AugmentPolicy, Dataset, augment_batch
from .dropout import set_draw, set_stream
from .errors import ConfigError
from .layers import BatchNorm2d
from .network import all_paths_dropped, reset_path_counters

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "train_loss", "train_error", "test_error", "lr",
              "wall_seconds", "all_paths_dropped"]


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    dampening: float = 0.0
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 10
    lr_drop_points: tuple[float, ...] = (0.5, 0.75)
    lr_drop_factor: float = 0.1
    seed: int = 0
    nesterov: bool = True
    decay_bn: bool = True
    record_wall_time: bool = False

    def __post_init__(self):
        self.lr_drop_points = tuple(float(f) for f in self.lr_drop_points)
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.dampening <= 1.0:
            raise ConfigError("dampening must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, weight_decay >= 0 required")
        pts = self.lr_drop_points
        if any(not 0.0 < f < 1.0 for f in pts) or list(pts) != sorted(pts):
            raise ConfigError("lr_drop_points must be sorted fractions in (0, 1)")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_error: float
    test_error: float
    lr: float
    wall_seconds: float
    all_paths_dropped: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ConfigError("labels must be integers in [0, num_classes)")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    passed = sum(epoch >= f * cfg.epochs - 1e-9 for f in cfg.lr_drop_points)
    return cfg.lr0 * cfg.lr_drop_factor ** passed


class SGD:
    """Nesterov SGD on a layer tree's ``params``/``grads`` dicts.

    Per parameter: ``g' = g + wd * theta``; ``v = momentum * v + (1 -
    dampening) * g'``; ``theta -= lr * (g' + momentum * v)``.  Without
    Nesterov the last step is ``theta -= lr * v``.  Velocities start at 0.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, net, lr: float):
        cfg = self.cfg
        for name, owner, key in net.named_parameters():
            theta = owner.params[key]
            g = owner.grads.get(key)
            if g is None:
                continue
            wd = cfg.weight_decay
            if not cfg.decay_bn and isinstance(owner, BatchNorm2d):
                wd = 0.0
            sgd_update(theta, g, self.velocity, name, lr, cfg.momentum, wd,
                       cfg.dampening, cfg.nesterov)


def sgd_update(theta, g, velocity, name, lr, momentum, weight_decay, dampening=0.0,
               nesterov=True):
    """In-place update of ``theta``; ``velocity[name]`` holds the momentum buffer."""
    g = g + weight_decay * theta if weight_decay else g
    if momentum == 0.0:
        theta -= lr * g
        return
    v = velocity.get(name)
    if v is None:
        v = velocity[name] = np.zeros_like(theta)
    v *= momentum
    v += (1.0 - dampening) * g
    if nesterov:
        theta -= lr * (g + momentum * v)
    else:
        theta -= lr * v


def evaluate(net, ds: Dataset, batch_size: int = 256):
    """Eval-mode mean loss and error percentage on ``ds``."""
    if len(ds) == 0:
        return float("nan"), 0.0
    net.eval()
    total_loss, wrong = 0.0, 0
    for start in range(0, len(ds), batch_size):
        x = ds.images[start:start + batch_size]
        y = ds.labels[start:start + batch_size]
        logits = net.forward(x)
        loss, _ = cross_entropy(logits, y)
        total_loss += loss * len(y)
        wrong += int((logits.argmax(axis=1) != y).sum())
    return total_loss / len(ds), 100.0 * wrong / len(ds)


def train(net, train_ds: Dataset, test_ds: Dataset | None, cfg: TrainConfig,
          augment: AugmentPolicy | None = None, on_epoch=None) -> list[MetricsRecord]:
    """Train ``net`` in place and return one metrics record per epoch.

    Data order, augmentation and dropout masks are keyed by ``cfg.seed``, the
    epoch and the step, so identical inputs give identical runs.  Train loss
    and error are averaged over the epoch's mini-batches in train mode; test
    error is measured in eval mode after each epoch.
    """
    opt = SGD(cfg)
    set_stream(net, cfg.seed)
    records: list[MetricsRecord] = []
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        reset_path_counters(net)
        order = rng.keyed(rng.SHUFFLE, cfg.seed, epoch).permutation(n)
        loss_sum, wrong, seen = 0.0, 0, 0
        diverged = False
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = train_ds.images[idx]
            if augment is not None and augment.enabled:
                x = augment_batch(x, idx, augment, cfg.seed, epoch, n)
            y = train_ds.labels[idx]
            net.train()
            set_draw(net, epoch, step)
            logits = net.forward(x)
            loss, grad = cross_entropy(logits, y)
            if not math.isfinite(loss):
                diverged = True
                loss_sum += loss * len(y)
                seen += len(y)
                break
            net.zero_grad()
            net.backward(grad.astype(logits.dtype, copy=False))
            opt.step(net, lr)
            loss_sum += loss * len(y)
            wrong += int((logits.argmax(axis=1) != y).sum())
            seen += len(y)
        test_error = evaluate(net, test_ds)[1] if test_ds is not None else float("nan")
        rec = MetricsRecord(
            epoch=epoch,
            train_loss=loss_sum / max(seen, 1),
            train_error=100.0 * wrong / max(seen, 1),
            test_error=test_error,
            lr=lr,
            wall_seconds=time.perf_counter() - t0,
            all_paths_dropped=all_paths_dropped(net),
        )
        records.append(rec)
        log.info("epoch %d loss %.4f train_err %.2f test_err %.2f lr %g",
                 epoch, rec.train_loss, rec.train_error, rec.test_error, lr)
        if on_epoch is not None:
            on_epoch(rec)
        if diverged:
            raise TrainingDiverged(f"non-finite loss in epoch {epoch}", records)
    return records


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.6g}"


def metrics_csv(records, record_wall_time: bool = False) -> str:
    """Metrics as CSV text.  ``wall_seconds`` is left empty unless
    ``record_wall_time`` is set, so reruns produce identical bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        wall = _fmt(r.wall_seconds) if record_wall_time else ""
        w.writerow([r.epoch, _fmt(r.train_loss), _fmt(r.train_error), _fmt(r.test_error),
                    _fmt(r.lr), wall, r.all_paths_dropped])
    return buf.getvalue()


def write_metrics_csv(path, records, record_wall_time: bool = False):
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(records, record_wall_time))
