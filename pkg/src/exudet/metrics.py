"""Binary classification metrics built on a confusion matrix.

The positive class is "Exudate" (label 1) throughout.  All metric functions
are pure; zero denominators yield 0.0 and set ``zero_division`` on the report
instead of raising, so degenerate early-epoch evaluations never crash.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts for binary predictions with label 1 (Exudate) as positive."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """The same predictions scored with label 0 as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(preds: Sequence[int], truth: Sequence[int]) -> ConfusionMatrix:
    """Tally a confusion matrix from parallel prediction/truth label arrays."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise DataError(
            f"predictions {preds.shape} and truth {truth.shape} must be equal-length 1-D")
    for name, arr in (("predictions", preds), ("truth", truth)):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise DataError(f"{name} must contain only labels 0 and 1")
    return ConfusionMatrix(
        tp=int(((preds == 1) & (truth == 1)).sum()),
        fp=int(((preds == 1) & (truth == 0)).sum()),
        fn=int(((preds == 0) & (truth == 1)).sum()),
        tn=int(((preds == 0) & (truth == 0)).sum()),
    )


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    confusion: ConfusionMatrix
    degree_of_overfitting: Optional[float] = None
    zero_division: bool = False

    def to_json_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "confusion": self.confusion.to_dict(),
            "degree_of_overfitting": self.degree_of_overfitting,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def report(matrix: ConfusionMatrix,
           train_accuracy: Optional[float] = None,
           val_accuracy: Optional[float] = None) -> MetricsReport:
    """Score a confusion matrix; optionally include train-vs-val overfitting.

    ``degree_of_overfitting`` is train accuracy minus validation accuracy and
    is reported only when both accuracies are supplied.  It may be negative.
    """
    if matrix.total == 0:
        raise DataError("cannot compute metrics for an empty confusion matrix")
    zero_division = False
    if matrix.tp + matrix.fp == 0:
        precision, zero_division = 0.0, True
    else:
        precision = matrix.tp / (matrix.tp + matrix.fp)
    if matrix.tp + matrix.fn == 0:
        recall, zero_division = 0.0, True
    else:
        recall = matrix.tp / (matrix.tp + matrix.fn)
    degree = None
    if train_accuracy is not None and val_accuracy is not None:
        degree = train_accuracy - val_accuracy
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        accuracy=(matrix.tp + matrix.tn) / matrix.total,
        confusion=matrix,
        degree_of_overfitting=degree,
        zero_division=zero_division,
    )


def format_percent(fraction: float) -> str:
    """Render a [0,1] fraction as a percentage with two decimals: 0.9936 -> '99.36'."""
    return f"{fraction * 100:.2f}"
