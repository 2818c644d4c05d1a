"""Binary classification metrics: confusion matrix, accuracy/precision/recall/F1, ROC AUC.

Positive class is label 1.  A sample is predicted positive iff its score is
``>= threshold``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BadLabel, EmptyMatrix, LengthMismatch, OneClassOnly

DEFAULT_THRESHOLD = 0.5
REPORT_KEYS = ("accuracy", "auc", "precision", "recall", "f1", "tp", "fp", "tn", "fn", "threshold")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    confusion: ConfusionMatrix
    threshold: float = DEFAULT_THRESHOLD
    roc_points: list = field(default_factory=list)

    def to_dict(self):
        cm = self.confusion
        return {
            "accuracy": self.accuracy, "auc": self.auc, "precision": self.precision,
            "recall": self.recall, "f1": self.f1, "tp": cm.tp, "fp": cm.fp,
            "tn": cm.tn, "fn": cm.fn, "threshold": self.threshold,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        cm = ConfusionMatrix(int(d["tp"]), int(d["fp"]), int(d["tn"]), int(d["fn"]))
        return cls(d["accuracy"], d["precision"], d["recall"], d["f1"], d["auc"], cm, d["threshold"])


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise EmptyMatrix("no samples")
    if not np.all((labels == 0) | (labels == 1)):
        raise BadLabel(f"labels must be 0/1, got {np.unique(labels)}")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold=DEFAULT_THRESHOLD) -> ConfusionMatrix:
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def scalar_metrics(cm: ConfusionMatrix):
    """(accuracy, precision, recall, f1) with zero-division mapped to 0."""
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, precision, recall, f1


def roc_auc(scores, labels):
    """Trapezoidal ROC AUC; tied scores form one diagonal ROC segment."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, list(zip(fpr.tolist(), tpr.tolist()))


def evaluate_scores(scores, labels, threshold=DEFAULT_THRESHOLD) -> MetricsReport:
    cm = confusion(scores, labels, threshold)
    acc, prec, rec, f1 = scalar_metrics(cm)
    try:
        auc, points = roc_auc(scores, labels)
    except OneClassOnly:
        auc, points = None, []
    return MetricsReport(acc, prec, rec, f1, auc, cm, threshold, points)
