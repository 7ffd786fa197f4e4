"""LEEP transferability, accuracy metrics, and convergence-speed extraction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Metric

LOG_BASE = "e"


class DegeneratePredictionsError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    """Source-model label distributions on target data plus the target labels."""

    source_distributions: np.ndarray
    target_labels: np.ndarray
    n_target_classes: int | None = None

    def __post_init__(self):
        theta = np.asarray(self.source_distributions, dtype=np.float64)
        y = np.asarray(self.target_labels)
        if theta.ndim != 2 or theta.shape[0] < 1:
            raise ValueError("source_distributions must be an n x |Z| matrix with n >= 1")
        if y.shape != (theta.shape[0],):
            raise ValueError("need one target label per row")
        if not np.issubdtype(y.dtype, np.integer) or (y < 0).any():
            raise ValueError("target labels must be non-negative integers")
        if (theta < 0).any() or not np.allclose(theta.sum(1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("rows of source_distributions must be probability vectors")
        n_y = self.n_target_classes if self.n_target_classes is not None else int(y.max()) + 1
        if y.max() >= n_y:
            raise ValueError("target label out of range")
        object.__setattr__(self, "source_distributions", theta)
        object.__setattr__(self, "target_labels", y.astype(np.int64))
        object.__setattr__(self, "n_target_classes", n_y)


def leep_score(preds: PredictionSet) -> float:
    """Log expected empirical prediction (natural log); 0 is the upper bound."""
    theta, y = preds.source_distributions, preds.target_labels
    n = theta.shape[0]
    onehot = np.zeros((n, preds.n_target_classes))
    onehot[np.arange(n), y] = 1.0
    joint = onehot.T @ theta / n                      # |Y| x |Z|
    marginal = joint.sum(0)                           # P(z)
    live = marginal > 0
    cond = np.zeros_like(joint)
    cond[:, live] = joint[:, live] / marginal[live]   # P(y | z)
    eep = np.einsum("iz,iz->i", theta, cond[y])       # sum_z P(y_i | z) theta_z
    if (eep <= 0).any():
        raise DegeneratePredictionsError("expected empirical prediction is zero for some sample")
    return float(min(np.log(eep).mean(), 0.0))


def _check_pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("prediction and label arrays differ in length")
    if pred.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return pred, true


def top1_accuracy(predicted_labels, true_labels) -> float:
    pred, true = _check_pair(predicted_labels, true_labels)
    return float((pred == true).mean())


def mean_per_class_accuracy(predicted_labels, true_labels, n_classes: int) -> float:
    pred, true = _check_pair(predicted_labels, true_labels)
    accs = []
    for c in range(n_classes):
        sel = true == c
        if not sel.any():
            raise ValueError(f"class {c} has no evaluation samples")
        accs.append((pred[sel] == c).mean())
    return float(np.mean(accs))


def accuracy(metric: Metric | str, predicted_labels, true_labels, n_classes: int) -> float:
    if Metric(metric) is Metric.TOP1:
        return top1_accuracy(predicted_labels, true_labels)
    return mean_per_class_accuracy(predicted_labels, true_labels, n_classes)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    eval_accuracy: float | None = None


@dataclass
class ConvergenceTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def convergence_epochs(trace: ConvergenceTrace | Sequence[EpochRecord], threshold: float) -> int | None:
    """First epoch whose train accuracy reaches ``threshold``, or None."""
    records = trace.records if isinstance(trace, ConvergenceTrace) else list(trace)
    if not records:
        raise ValueError("empty trace")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    for r in records:
        if r.train_accuracy >= threshold:
            return r.epoch
    return None
