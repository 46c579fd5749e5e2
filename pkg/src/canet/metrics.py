"""Confusion-count metrics for the change class."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Metrics", "confusion_counts"]


def confusion_counts(pred, truth):
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and label {truth.shape} differ in shape")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def _ratio(num: int, den: int, other_den: int) -> float:
    # empty prediction and empty truth count as perfect
    if den == 0:
        return 1.0 if other_den == 0 else 0.0
    return num / den


@dataclass(frozen=True)
class Metrics:
    """Pixel confusion counts; derived scores are properties.

    Zero denominators: with no predicted and no true change pixels both
    precision and recall are 1. Otherwise an empty denominator gives 0,
    and F1 is 0 when precision + recall is 0.
    """

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_maps(cls, pred, truth) -> "Metrics":
        return cls(*confusion_counts(pred, truth))

    def __add__(self, other: "Metrics") -> "Metrics":
        if not isinstance(other, Metrics):
            return NotImplemented
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp, self.tp + self.fn)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn, self.tp + self.fp)

    @property
    def f1(self) -> float:
        # 2PR/(P+R) rewritten on counts; agrees with the conventions above
        den = 2 * self.tp + self.fp + self.fn
        return 1.0 if den == 0 else 2 * self.tp / den

    @property
    def iou(self) -> float:
        den = self.tp + self.fp + self.fn
        return 1.0 if den == 0 else self.tp / den

    def as_dict(self) -> dict:
        return {"f1": self.f1, "precision": self.precision, "recall": self.recall, "iou": self.iou}
