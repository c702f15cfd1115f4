"""Confusion matrices and the OA / AA / Kappa accuracy measures."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray   # rows = true class, columns = predicted

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int) -> "ConfusionMatrix":
        """Build from 1-based class labels."""
        y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true - 1, y_pred - 1), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _counts(m) -> np.ndarray:
    return m.counts if isinstance(m, ConfusionMatrix) else ConfusionMatrix(np.asarray(m)).counts


def per_class_accuracy(m) -> np.ndarray:
    """diag / row-sum per class; NaN for classes with no samples."""
    c = _counts(m).astype(np.float64)
    rows = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(c) / np.where(rows > 0, rows, 1), np.nan)


def metrics_from_confusion(m) -> tuple[float, float, float]:
    """(OA, AA, Kappa). AA averages only classes that have samples."""
    c = _counts(m).astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    oa = np.trace(c) / total
    acc = per_class_accuracy(c)
    aa = float(np.nanmean(acc))
    pe = float((c.sum(axis=1) * c.sum(axis=0)).sum() / total ** 2)
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return float(oa), aa, float(kappa)


def excluded_classes(m) -> list[int]:
    """1-based ids of classes left out of AA because they have no samples."""
    return [int(i) + 1 for i in np.flatnonzero(_counts(m).sum(axis=1) == 0)]
