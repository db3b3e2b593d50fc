"""Mini-batch cross-entropy training of the patch discriminator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .network import ClassifierParams, forward, loss_and_grads
from .sampling import PatchDataset

__all__ = ["TrainConfig", "DegenerateLabelsError", "input_statistics", "train", "accuracy"]

log = logging.getLogger(__name__)


class DegenerateLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 256
    weight_decay: float = 0.005
    epochs: int = 10
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s, dtype=np.float32) for s in shapes]
        self.v = [np.zeros(s, dtype=np.float32) for s in shapes]
        self.t = 0

    def step(self, weights, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            w -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)


class _SGD:
    def __init__(self, shapes, lr, momentum):
        self.lr, self.momentum = lr, momentum
        self.buf = [np.zeros(s, dtype=np.float32) for s in shapes]

    def step(self, weights, grads):
        for w, g, b in zip(weights, grads, self.buf):
            if self.momentum:
                b *= self.momentum
                b += g
                g = b
            w -= (self.lr * g).astype(np.float32)


def input_statistics(data: PatchDataset) -> tuple[tuple, tuple]:
    """Per-channel mean and standard deviation of a dataset (``(u, v)`` order)."""
    shift, scale = [], []
    for x in (data.u, data.v):
        x = x.astype(np.float64)
        shift.append(float(x.mean()))
        sd = float(x.std())
        scale.append(sd if sd > 0 else 1.0)
    return tuple(shift), tuple(scale)


def train(theta0: ClassifierParams, data: PatchDataset, cfg: TrainConfig):
    """Fit the discriminator; returns ``(theta, per-epoch mean loss)``.

    ``theta0`` is left untouched. Batches are drawn from a per-epoch
    permutation seeded by ``cfg.seed``, so the result is reproducible. With
    ``cfg.standardize`` the returned classifier carries the dataset's
    per-channel mean and standard deviation as its input normalization.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    labels = np.unique(data.z)
    if labels.size < 2:
        raise DegenerateLabelsError("degenerate labels")
    theta = theta0.copy()
    if cfg.standardize:
        shift, scale = input_statistics(data)
        theta = ClassifierParams(replace(theta.arch, input_shift=shift, input_scale=scale), theta.weights, theta.seed)
    shapes = [w.shape for w in theta.weights]
    if cfg.optimizer == "adam":
        opt = _Adam(shapes, cfg.learning_rate)
    else:
        opt = _SGD(shapes, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(theta, data.u[idx], data.v[idx], data.z[idx], cfg.weight_decay, dtype=np.float32)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            opt.step(theta.weights, grads)
            total += loss * len(idx)
        trace.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, trace[-1])
    return theta, trace


def accuracy(theta: ClassifierParams, data: PatchDataset, batch: int = 4096) -> float:
    hits = 0
    for start in range(0, len(data), batch):
        f = forward(theta, data.u[start : start + batch], data.v[start : start + batch], dtype=np.float32)
        hits += int(((f > 0) == (data.z[start : start + batch] > 0.5)).sum())
    return hits / len(data)
