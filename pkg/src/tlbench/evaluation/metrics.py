"""Confusion matrix, scalar metrics and ROC analysis in plain NumPy.

Class 1 (covid) is the positive class for binary averaging. Ratios with a zero
denominator evaluate to 0 and are recorded in ``MetricReport.flags`` rather
than raised.
"""
from __future__ import annotations

import math
import warnings
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ..errors import MetricConsistencyWarning, RangeError, ShapeError, UndefinedAUCError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


def averaging_mode(num_classes: int) -> str:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    return "binary" if num_classes == 2 else "macro"


def predict_labels(scores, num_classes: int = 2, threshold: float = 0.5) -> np.ndarray:
    """Turn model outputs into hard labels.

    One score per sample (sigmoid output): label 1 iff score >= threshold.
    A row of K class probabilities: arg-max, lowest index on exact ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2 and s.shape[1] == 1:
        s = s[:, 0]
    if s.ndim == 1:
        if num_classes != 2:
            raise ShapeError(f"1-D scores need num_classes=2, got {num_classes}")
        if s.size and (s.min() < 0.0 or s.max() > 1.0):
            raise ShapeError("binary scores must lie in [0, 1]")
        return (s >= threshold).astype(np.int64)
    if s.ndim != 2 or s.shape[1] != num_classes:
        raise ShapeError(f"expected (N, {num_classes}) scores, got {s.shape}")
    if s.size and np.max(np.abs(s.sum(axis=1) - 1.0)) > 1e-4:
        raise ShapeError("class-probability rows must sum to 1 within 1e-4")
    return np.argmax(s, axis=1)


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted classes."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.int64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {m.shape}")
        if (m < 0).any():
            raise RangeError("confusion matrix entries must be nonnegative")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_binary(cls, tp: int, tn: int, fp: int, fn: int) -> "ConfusionMatrix":
        return cls(np.array([[tn, fp], [fn, tp]]))

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def _binary(self, i: int, j: int) -> int:
        if self.num_classes != 2:
            raise ShapeError("TP/TN/FP/FN are defined for binary matrices only")
        return int(self.matrix[i, j])

    tn = property(lambda self: self._binary(0, 0))
    fp = property(lambda self: self._binary(0, 1))
    fn = property(lambda self: self._binary(1, 0))
    tp = property(lambda self: self._binary(1, 1))


def confusion(y_true, y_pred, num_classes: int) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ShapeError(f"label arrays differ in length: {t.size} vs {p.size}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise RangeError(f"{name} labels must lie in [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return ConfusionMatrix(m)


def _ratio(num: int, den: int, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str
    per_class: list[dict]
    confusion: list[list[int]]
    auc: float | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _per_class(m: np.ndarray, flags: list[str]) -> list[dict]:
    rows = []
    for k in range(m.shape[0]):
        tp = int(m[k, k])
        fp = int(m[:, k].sum()) - tp
        fn = int(m[k, :].sum()) - tp
        rows.append(
            {
                "label": k,
                "precision": _ratio(tp, tp + fp, f"precision[{k}]: no predictions", flags),
                "recall": _ratio(tp, tp + fn, f"recall[{k}]: no true samples", flags),
                # harmonic mean of precision and recall, in count form
                "f1": _ratio(2 * tp, 2 * tp + fp + fn, f"f1[{k}]: undefined", flags),
                "support": tp + fn,
            }
        )
    return rows


def _macro(m: np.ndarray) -> tuple[float, float, float]:
    """Unweighted per-class means, summed exactly and rounded once."""
    k = m.shape[0]
    sums = [Fraction(0)] * 3
    for c in range(k):
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c, :].sum()) - tp
        for j, (num, den) in enumerate(((tp, tp + fp), (tp, tp + fn), (2 * tp, 2 * tp + fp + fn))):
            if den:
                sums[j] += Fraction(num, den)
    return tuple(float(v / k) for v in sums)


def scalar_metrics(cm: ConfusionMatrix, averaging: str | None = None) -> MetricReport:
    """Accuracy, precision, recall and F1 from a confusion matrix.

    ``binary`` reports the positive class (index 1); ``macro`` averages the
    per-class values without weighting.
    """
    m = cm.matrix
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    averaging = averaging or averaging_mode(cm.num_classes)
    flags: list[str] = []
    per_class = _per_class(m, flags)
    accuracy = int(np.trace(m)) / total
    if averaging == "binary":
        if cm.num_classes != 2:
            raise ShapeError("binary averaging needs a 2 x 2 matrix")
        pos = per_class[1]
        precision, recall, f1 = pos["precision"], pos["recall"], pos["f1"]
    elif averaging == "macro":
        precision, recall, f1 = _macro(m)
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    return MetricReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        averaging=averaging,
        per_class=per_class,
        confusion=m.tolist(),
        flags=flags,
    )


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produces point i+1; point 0 is (0, 0)
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_and_auc(y_true, scores) -> RocCurve:
    """ROC curve over every distinct score threshold, with trapezoid AUC.

    A sample is called positive at threshold t when its score >= t. The
    trapezoid area is accumulated in integer counts and divided once, so it
    equals the pairwise rank statistic (ties worth one half) exactly.
    """
    y = np.asarray(y_true).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ShapeError(f"labels and scores differ in length: {y.size} vs {s.size}")
    if not np.isin(y, (0, 1)).all():
        raise RangeError("ROC analysis needs binary labels in {0, 1}")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tps = np.cumsum(y_sorted)[ends]
    fps = (ends + 1) - tps
    tps = np.r_[0, tps]
    fps = np.r_[0, fps]
    twice_area = int(np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])))
    return RocCurve(
        fpr=fps / n_neg,
        tpr=tps / n_pos,
        thresholds=s_sorted[ends],
        auc=twice_area / (2 * n_pos * n_neg),
    )


def evaluate_scores(y_true, scores, num_classes: int = 2, threshold: float = 0.5) -> MetricReport:
    """Full report (including AUC when defined) from labels and model outputs."""
    y = np.asarray(y_true, dtype=np.int64).ravel()
    pred = predict_labels(scores, num_classes, threshold)
    report = scalar_metrics(confusion(y, pred, num_classes))
    s = np.asarray(scores, dtype=np.float64)
    if num_classes == 2:
        pos = s.reshape(len(y), -1)[:, -1]
        try:
            report.auc = roc_and_auc(y, pos).auc
        except UndefinedAUCError:
            report.flags.append("auc: single class present")
    else:
        aucs = []
        for k in range(num_classes):
            try:
                aucs.append(roc_and_auc((y == k).astype(int), s[:, k]).auc)
            except UndefinedAUCError:
                report.flags.append(f"auc[{k}]: single class present")
        report.auc = float(np.mean(aucs)) if aucs else None
    return report


def check_consistency(
    report: MetricReport, claimed: Mapping[str, float], tol: float = 1e-4
) -> dict[str, tuple[float, float]]:
    """Compare recomputed metrics with claimed ones; warn on any disagreement.

    Returns ``{metric: (recomputed, claimed)}`` for every metric off by more
    than ``tol``.
    """
    mismatches = {}
    for name, value in claimed.items():
        mine = getattr(report, name)
        if mine is None or not math.isclose(mine, value, rel_tol=0.0, abs_tol=tol):
            mismatches[name] = (mine, value)
    if mismatches:
        detail = ", ".join(f"{k}: computed {a} vs claimed {b}" for k, (a, b) in mismatches.items())
        warnings.warn(f"metrics inconsistent with confusion matrix ({detail})",
                      MetricConsistencyWarning, stacklevel=2)
    return mismatches
