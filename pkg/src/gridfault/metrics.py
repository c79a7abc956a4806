"""Confusion matrix and (weighted) F1 with the fault class as positive."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tn + self.fp + self.fn + self.tp

    def swapped(self) -> "ConfusionMatrix":
        """The same matrix seen with class 0 as the positive class."""
        return ConfusionMatrix(tn=self.tp, fp=self.fn, fn=self.fp, tp=self.tn)

    def to_dict(self):
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


def confusion(labels_true, labels_pred) -> ConfusionMatrix:
    t = np.asarray(labels_true).astype(int).ravel()
    p = np.asarray(labels_pred).astype(int).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} labels vs {p.size} predictions")
    return ConfusionMatrix(
        tn=int(np.sum((t == 0) & (p == 0))),
        fp=int(np.sum((t == 0) & (p == 1))),
        fn=int(np.sum((t == 1) & (p == 0))),
        tp=int(np.sum((t == 1) & (p == 1))),
    )


def f1(cm: ConfusionMatrix, positive: int = 1) -> float:
    """F1 = tp / (tp + (fp + fn) / 2).

    Degenerate convention: with no positives present and none predicted the
    score is 1; any other zero denominator cannot occur.
    """
    if positive == 0:
        cm = cm.swapped()
    denom = cm.tp + 0.5 * (cm.fp + cm.fn)
    if denom == 0:
        return 1.0
    return cm.tp / denom


def weighted_f1(per_class_f1, per_class_counts) -> float:
    """Class-size weighted mean of per-class F1, ordered (fault, non-fault)
    or any consistent order."""
    f = np.asarray(per_class_f1, dtype=float)
    n = np.asarray(per_class_counts, dtype=float)
    total = n.sum()
    if total <= 0:
        raise ValueError("weighted F1 needs a positive total count")
    return float((n * f).sum() / total)


def f1_scores(labels_true, labels_pred) -> tuple[float, float, float]:
    """(f1_fault, f1_nonfault, f1_weighted) for a label vector pair."""
    cm = confusion(labels_true, labels_pred)
    f_fault, f_non = f1(cm, 1), f1(cm, 0)
    return f_fault, f_non, weighted_f1((f_fault, f_non), (cm.tp + cm.fn, cm.tn + cm.fp))
