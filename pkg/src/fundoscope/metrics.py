"""Evaluation metrics: confusion matrix, recall/precision, ROC/AUC, quadratic weighted kappa.

Undefined ratios (0/0) come back as ``None`` rather than 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[i, j]: true class i predicted as j

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def accuracy(self):
        return _ratio(np.trace(self.counts), self.total)

    def tolist(self):
        return self.counts.tolist()


def _ratio(num, den):
    return None if den == 0 else float(num) / float(den)


def confusion(true_labels, predicted_labels, n_classes) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def recall_precision(cm: ConfusionMatrix):
    """Per-class ``(recall, precision)`` pairs; ``None`` marks an undefined ratio."""
    c = cm.counts
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    return [(_ratio(c[i, i], rows[i]), _ratio(c[i, i], cols[i])) for i in range(cm.n_classes)]


def sensitivity_specificity(tp, fp, fn, tn):
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("counts must be non-negative")
    return _ratio(tp, tp + fn), _ratio(tn, fp + tn)


def binary_counts(scores, labels, threshold):
    """TP, FP, FN, TN when predicting positive for ``score >= threshold``."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    pos = s >= threshold
    return (int(np.sum(pos & y)), int(np.sum(pos & ~y)), int(np.sum(~pos & y)), int(np.sum(~pos & ~y)))


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; first entry is +inf
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self):
        rows = ["threshold,fpr,tpr"]
        rows += [f"{t!r},{f!r},{s!r}" for t, f, s in zip(self.thresholds, self.fpr, self.tpr)]
        return "\n".join(rows) + "\n"

    def operating_point(self, min_specificity=None, min_sensitivity=None):
        """First ROC vertex meeting a specificity or sensitivity target."""
        if min_specificity is not None:
            ok = np.flatnonzero(1 - self.fpr >= min_specificity)
            i = ok[-1]
        else:
            ok = np.flatnonzero(self.tpr >= min_sensitivity)
            i = ok[0]
        return {"threshold": float(self.thresholds[i]), "sensitivity": float(self.tpr[i]),
                "specificity": float(1 - self.fpr[i])}


def roc_auc(scores, binary_labels) -> RocCurve:
    """ROC vertices at every distinct score plus trapezoidal AUC.

    Tied scores enter together, so their segment is a diagonal and the
    trapezoid credits them one half, the same as the Mann–Whitney statistic.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(binary_labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = (last_of_run + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_run]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2)
    return RocCurve(thresholds, fpr, tpr, auc)


def quadratic_weights(n_classes):
    i = np.arange(n_classes)
    return (i[:, None] - i[None, :]) ** 2 / (n_classes - 1) ** 2


def quadratic_weighted_kappa(cm):
    """Quadratic weighted kappa (Cohen, squared-distance weights); ``None`` when chance disagreement is zero."""
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(cm)
    o = cm.counts.astype(float)
    n = o.sum()
    if n <= 0:
        raise ValueError("confusion matrix is empty")
    w = quadratic_weights(cm.n_classes)
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / n
    den = float(np.sum(w * e))
    if den == 0:
        return None
    return 1.0 - float(np.sum(w * o)) / den


@dataclass
class EvalReport:
    """Bundle of the metrics produced for one classifier."""

    name: str
    class_names: tuple
    confusion: ConfusionMatrix
    roc: RocCurve | None = None
    extras: dict = field(default_factory=dict)

    def per_class(self):
        return recall_precision(self.confusion)

    def kappa(self):
        return quadratic_weighted_kappa(self.confusion)

    def to_dict(self):
        d = {
            "name": self.name,
            "n": self.confusion.total,
            "confusion": self.confusion.tolist(),
            "accuracy": self.confusion.accuracy(),
            "quadratic_weighted_kappa": self.kappa(),
            "per_class": {name: {"recall": r, "precision": p}
                          for name, (r, p) in zip(self.class_names, self.per_class())},
        }
        if self.roc is not None:
            d["auc"] = self.roc.auc
        d.update(self.extras)
        return d

    def to_text(self):
        return format_report(self.to_dict())


def _fmt(v, digits=4):
    return "undefined" if v is None else f"{v:.{digits}f}"


def format_report(d) -> str:
    lines = [f"== {d['name']} (n={d['n']}) =="]
    lines.append(f"accuracy {_fmt(d['accuracy'])}   kappa {_fmt(d['quadratic_weighted_kappa'])}"
                 + (f"   AUC {_fmt(d['auc'])}" if d.get("auc") is not None else ""))
    lines.append("class            recall / precision")
    for name, rp in d["per_class"].items():
        lines.append(f"{name:<16} {_fmt(rp['recall'])} / {_fmt(rp['precision'])}")
    lines.append("confusion (rows: truth, cols: prediction)")
    for row in d["confusion"]:
        lines.append("  " + " ".join(f"{v:6d}" for v in row))
    return "\n".join(lines)
