"""Classification metrics: AUC, confusion-derived rates, weighted Youden
indices, F1 variants and per-group median aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, ParameterError

YOUDEN_WEIGHTS = (0.5, 0.6)


def _binary(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise DataError("binary metrics need labels in {0, 1}")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise DataError("both classes must be present")
    return s, y


def auc_rank(scores, labels) -> float:
    """Mann-Whitney U / (n+ n-), ties counted as half via midranks."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_trapezoid(scores, labels) -> float:
    """Trapezoidal area under the full ROC curve, one vertex per distinct score."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(~y)[last]]
    # integer-valued numerator keeps the two AUC routes bit-compatible
    twice_area = np.sum(np.diff(fp) * (tp[1:] + tp[:-1]))
    return float(twice_area / (2.0 * n_pos * n_neg))


def roc_auc(scores, labels) -> float:
    rank = auc_rank(scores, labels)
    trap = auc_trapezoid(scores, labels)
    if abs(rank - trap) > 1e-12:
        raise ArithmeticError(f"AUC routes disagree: rank {rank!r} vs trapezoid {trap!r}")
    return rank


def auc_ovr(probs: np.ndarray, labels) -> float:
    """Binary AUC on the positive-class column, or macro one-vs-rest for C > 2."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if probs.shape[1] == 2:
        return roc_auc(probs[:, 1], y)
    vals = [roc_auc(probs[:, c], y == c) for c in range(probs.shape[1]) if 0 < (y == c).sum() < y.size]
    if not vals:
        raise DataError("need at least two classes present for AUC")
    return float(np.mean(vals))


def confusion_metrics(scores, labels, threshold: float = 0.5) -> Tuple[float, float, float]:
    """(accuracy, sensitivity, specificity), predicting positive when score >= threshold."""
    s, y = _binary(scores, labels)
    pred = s >= threshold
    tp = int((pred & y).sum())
    fn = int((~pred & y).sum())
    tn = int((~pred & ~y).sum())
    fp = int((pred & ~y).sum())
    return (tp + tn) / y.size, tp / (tp + fn), tn / (tn + fp)


def weighted_youden(se: float, sp: float, w: float) -> float:
    for name, v in (("se", se), ("sp", sp), ("w", w)):
        if not 0.0 <= v <= 1.0:
            raise ParameterError(f"{name} must lie in [0, 1], got {v}")
    return w * se + (1.0 - w) * sp


def f1_scores(pred, labels, n_classes: int) -> Tuple[float, float, float]:
    """(macro F1, support-weighted F1, accuracy); 0/0 counts as an F1 of 0."""
    if n_classes < 2:
        raise ParameterError(f"n_classes must be >= 2, got {n_classes}")
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    f1 = np.zeros(n_classes)
    support = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((pred == c) & (y == c))
        denom = np.sum(pred == c) + np.sum(y == c)
        f1[c] = 2.0 * tp / denom if denom else 0.0
        support[c] = np.sum(y == c)
    weighted = float(np.sum(support * f1) / support.sum()) if support.sum() else 0.0
    return float(f1.mean()), weighted, float(np.mean(pred == y))


def median_aggregate(scores, group_ids) -> Tuple[List[str], np.ndarray]:
    """Per-group median of ``scores`` (rows may be vectors), groups in first-seen order."""
    s = np.asarray(scores, dtype=np.float64)
    order: Dict[str, List[int]] = {}
    for i, g in enumerate(group_ids):
        order.setdefault(g, []).append(i)
    groups = list(order)
    return groups, np.array([np.median(s[idx], axis=0) for idx in order.values()])


def aggregate_labels(labels, group_ids) -> np.ndarray:
    y = np.asarray(labels)
    first: Dict[str, int] = {}
    for i, g in enumerate(group_ids):
        first.setdefault(g, i)
    return y[list(first.values())]


@dataclass
class MetricsReport:
    auc: float
    accuracy: float
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    jw: Dict[str, float] = field(default_factory=dict)
    f1_macro: Optional[float] = None
    f1_weighted: Optional[float] = None
    n: int = 0
    per_fold: Dict[str, List[float]] = field(default_factory=dict)

    def summary(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for key, vals in self.per_fold.items():
            a = np.asarray(vals, dtype=np.float64)
            out[key] = {"mean": float(a.mean()), "std": float(a.std())}
        return out

    def as_dict(self) -> dict:
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "jw": dict(sorted(self.jw.items())),
            "f1_macro": self.f1_macro,
            "f1_weighted": self.f1_weighted,
            "n": self.n,
            "per_fold": {k: list(v) for k, v in sorted(self.per_fold.items())},
            "per_fold_summary": self.summary(),
        }

    def to_text(self) -> str:
        """Rounded display lines followed by a full-precision JSON block."""
        lines = ["# metrics report"]
        for key in ("auc", "accuracy", "sensitivity", "specificity", "f1_macro", "f1_weighted"):
            v = getattr(self, key)
            if v is not None:
                lines.append(f"{key}: {v:.4f}")
        for w, v in sorted(self.jw.items()):
            lines.append(f"jw_{w}: {v:.4f}")
        lines.append(f"n: {self.n}")
        for key, stats in sorted(self.summary().items()):
            lines.append(f"{key}: {stats['mean']:.4f} +/- {stats['std']:.4f}")
        lines.append("# machine-readable")
        lines.append(json.dumps(self.as_dict(), sort_keys=True, indent=2))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        block = text.split("# machine-readable\n", 1)[1]
        d = json.loads(block)
        d.pop("per_fold_summary", None)
        return cls(**d)


def evaluate_probs(probs: np.ndarray, labels, threshold: float = 0.5,
                   group_ids: Optional[Sequence[str]] = None) -> MetricsReport:
    """Full report from class probabilities, median-aggregated per group when given."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if group_ids is not None:
        _, probs = median_aggregate(probs, group_ids)
        y = aggregate_labels(y, group_ids)
    c = probs.shape[1]
    auc = auc_ovr(probs, y)
    if c == 2:
        acc, se, sp = confusion_metrics(probs[:, 1], y, threshold)
        pred = (probs[:, 1] >= threshold).astype(np.int64)
        macro, weighted, _ = f1_scores(pred, y, 2)
        jw = {str(w): weighted_youden(se, sp, w) for w in YOUDEN_WEIGHTS}
        return MetricsReport(auc, acc, se, sp, jw, macro, weighted, int(y.size))
    macro, weighted, acc = f1_scores(probs.argmax(axis=1), y, c)
    return MetricsReport(auc, acc, f1_macro=macro, f1_weighted=weighted, n=int(y.size))
