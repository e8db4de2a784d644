"""Adam training loop, evaluation and the metrics log."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset
from .model import Model

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "accuracy", "loss", "wall_seconds")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    record_time: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.eval_every < 1:
            raise ValueError("epochs/batch_size/learning_rate/eval_every must be non-negative (batch_size, eval_every >= 1)")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam hyperparameters")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class Adam:
    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def predict(model: Model, volumes: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Logits in eval mode (fixed grid, running batch-norm statistics)."""
    out = [model.forward(volumes[i:i + batch_size], training=False) for i in range(0, len(volumes), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def evaluate(model: Model, data: Dataset, batch_size: int = 32, return_loss: bool = False):
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(model, data.volumes, batch_size)
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    if return_loss:
        return acc, cross_entropy(logits, data.labels)[0]
    return acc


@dataclass
class TrainResult:
    model: Model
    metrics: list = field(default_factory=list)

    def final(self, split: str) -> dict:
        rows = [r for r in self.metrics if r["split"] == split]
        return rows[-1] if rows else None

    def curve(self, split: str) -> list:
        return [(r["epoch"], r["accuracy"]) for r in self.metrics if r["split"] == split]


def train(model: Model, data: Dataset, cfg: TrainConfig, eval_sets: Optional[dict] = None,
          metrics_path=None) -> TrainResult:
    """Adam on mean cross-entropy; one random grid rotation per forward pass for gcnn models.

    Per epoch the running train accuracy/loss and the accuracy/loss of every
    eval split are appended to the metrics log (and to ``metrics_path`` as CSV).
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    eval_sets = eval_sets or {}
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.betas, cfg.eps)
    result = TrainResult(model)
    writer = _MetricsWriter(metrics_path)
    start = time.perf_counter()
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        correct, total_loss = 0, 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x, y = data.volumes[idx], data.labels[idx]
            grid = model.sample_grid(rng)
            model.zero_grad()
            logits = model.forward(x, grid, training=True)
            loss, grad = cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch {i // cfg.batch_size}; "
                    f"max |logit| = {np.abs(logits).max():.3g}, lr = {cfg.learning_rate}"
                )
            model.backward(grad)
            opt.step(params, model.gradients())
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            total_loss += loss * len(idx)
        elapsed = time.perf_counter() - start if cfg.record_time else 0.0
        rows = [dict(epoch=epoch, split="train", accuracy=correct / n, loss=total_loss / n, wall_seconds=elapsed)]
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            for split, ds in eval_sets.items():
                acc, loss = evaluate(model, ds, return_loss=True)
                elapsed = time.perf_counter() - start if cfg.record_time else 0.0
                rows.append(dict(epoch=epoch, split=split, accuracy=acc, loss=loss, wall_seconds=elapsed))
        for r in rows:
            log.info("epoch %d %s acc=%.4f loss=%.4f", r["epoch"], r["split"], r["accuracy"], r["loss"])
            writer.write(r)
        result.metrics.extend(rows)
    writer.close()
    return result


class _MetricsWriter:
    def __init__(self, path):
        self._fh = None
        if path is not None:
            self._fh = open(Path(path), "w", newline="")
            self._csv = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
            self._csv.writeheader()

    def write(self, row):
        if self._fh is not None:
            self._csv.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
