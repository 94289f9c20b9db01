"""Confusion-matrix metrics and ROC/AUC evaluation.

The threshold rule is documented and fixed: a score equal to the
threshold predicts positive.  The ROC curve groups tied scores into a
single threshold step and integrates with the trapezoidal rule over the
grouped points, which makes the area equal (exactly, in integer
arithmetic before the final division) to the Mann-Whitney concordance
statistic with half credit for ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _check_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if s.size == 0:
        raise ValueError("scores and labels must be non-empty")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally prediction = (score >= threshold) against binary labels."""
    s, y = _check_scores_labels(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("accuracy undefined on an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def sensitivity(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: no actual positives")
    return cm.tp / (cm.tp + cm.fn)


def specificity(cm: ConfusionMatrix) -> float:
    if cm.tn + cm.fp == 0:
        raise UndefinedMetricError("specificity undefined: no actual negatives")
    return cm.tn / (cm.tn + cm.fp)


def percent(ratio: float) -> int:
    """Ratio -> integer percent, rounding halves up (0.845 -> 85)."""
    return int(np.floor(ratio * 100.0 + 0.5))


@dataclass(frozen=True)
class RocCurve:
    """Ordered (fp_rate, tp_rate) points from threshold +inf down, plus AUC."""

    points: tuple[tuple[float, float], ...]
    auc: float

    def as_text(self) -> str:
        """Two-column export (fp_rate, tp_rate) for external plotting."""
        lines = [f"{fpr:.10g}\t{tpr:.10g}" for fpr, tpr in self.points]
        return "\n".join(lines) + "\n"


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve over grouped score ties, with trapezoidal AUC."""
    s, y = _check_scores_labels(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"ROC undefined with a single class ({n_pos} positives, {n_neg} negatives)")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # one step per distinct score, descending
    boundaries = np.nonzero(np.diff(s))[0]
    step_ends = np.concatenate([boundaries, [s.size - 1]])
    tp = np.concatenate([[0], np.cumsum(y)[step_ends]])
    fp = np.concatenate([[0], np.cumsum(1 - y)[step_ends]])

    # integer trapezoid: sum of dFP * (TP_i + TP_{i+1}) equals twice the
    # concordant-pair count plus the tied-pair count
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2 * n_pos * n_neg)
    points = tuple(zip((fp / n_neg).tolist(), (tp / n_pos).tolist()))
    return RocCurve(points=points, auc=auc)
