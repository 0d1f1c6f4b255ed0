"""Confusion-matrix accumulation, per-class and aggregate metrics, ROC/AUC.

Per-class values come from the TP/TN/FP/FN decomposition of one overall
confusion matrix accumulated over all test folds (rows = true class,
columns = predicted class). Aggregates are reported both support-weighted
and macro, side by side: the reference tables' precision/recall follow
support weighting while their specificity follows the macro mean, and the
table "accuracy" is the overall accuracy (identically the support-weighted
recall), not a weighted mean of the per-class one-vs-rest accuracies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .util import CxrscreenError

logger = logging.getLogger(__name__)

METRIC_ORDER = ("accuracy", "precision", "sensitivity", "f1", "specificity")


class MetricsError(CxrscreenError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray  # (K, K) int64; rows true, columns predicted

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels)
        if counts.shape != (k, k):
            raise MetricsError(f"counts shape {counts.shape} does not match {k} labels")
        if (counts < 0).any():
            raise MetricsError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> tuple[int, ...]:
        return tuple(int(n) for n in self.counts.sum(axis=1))

    def binary_decomposition(self, index: int) -> tuple[int, int, int, int]:
        """(TP, FN, FP, TN) for one class against the rest."""
        tp = int(self.counts[index, index])
        fn = int(self.counts[index].sum()) - tp
        fp = int(self.counts[:, index].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fn, fp, tn


def empty_confusion(labels: Sequence[str]) -> ConfusionMatrix:
    k = len(labels)
    return ConfusionMatrix(labels=tuple(labels), counts=np.zeros((k, k), dtype=np.int64))


def accumulate(
    cm: ConfusionMatrix, true_labels: Sequence[str], predicted_labels: Sequence[str]
) -> ConfusionMatrix:
    """Pure, order-independent accumulation: returns a new matrix."""
    if len(true_labels) != len(predicted_labels):
        raise MetricsError("true and predicted label streams differ in length")
    index = {label: i for i, label in enumerate(cm.labels)}
    counts = cm.counts.copy()
    for t, p in zip(true_labels, predicted_labels):
        if t not in index or p not in index:
            unknown = t if t not in index else p
            raise MetricsError(f"unknown label {unknown!r}; matrix labels are {cm.labels}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(labels=cm.labels, counts=counts)


@dataclass(frozen=True)
class ClassMetrics:
    labels: tuple[str, ...]
    accuracy: tuple[float, ...]
    precision: tuple[float, ...]
    sensitivity: tuple[float, ...]
    f1: tuple[float, ...]
    specificity: tuple[float, ...]
    degenerate: tuple[str, ...]  # "label/metric" markers for zero-denominator cases

    def of(self, metric: str) -> tuple[float, ...]:
        return getattr(self, metric)


def _ratio(num: int, den: int, label: str, metric: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{label}/{metric}")
        return 0.0
    return num / den


def per_class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Accuracy, precision (PPV), sensitivity (recall), F1 and specificity per
    class from the one-vs-rest decomposition; zero denominators yield 0 and a
    degeneracy flag."""
    if cm.total == 0:
        raise MetricsError("confusion matrix is empty")
    flags: list[str] = []
    acc, prec, sens, f1s, spec = [], [], [], [], []
    for i, label in enumerate(cm.labels):
        tp, fn, fp, tn = cm.binary_decomposition(i)
        acc.append((tp + tn) / cm.total)
        p = _ratio(tp, tp + fp, label, "precision", flags)
        s = _ratio(tp, tp + fn, label, "sensitivity", flags)
        prec.append(p)
        sens.append(s)
        if p + s == 0:
            flags.append(f"{label}/f1")
            f1s.append(0.0)
        else:
            f1s.append(2 * p * s / (p + s))
        spec.append(_ratio(tn, tn + fp, label, "specificity", flags))
    return ClassMetrics(
        labels=cm.labels,
        accuracy=tuple(acc),
        precision=tuple(prec),
        sensitivity=tuple(sens),
        f1=tuple(f1s),
        specificity=tuple(spec),
        degenerate=tuple(flags),
    )


@dataclass(frozen=True)
class AggregateMetrics:
    weighted: Mapping[str, float]
    macro: Mapping[str, float]
    supports: tuple[int, ...]


def aggregate(metrics: ClassMetrics, supports: Sequence[int]) -> AggregateMetrics:
    """Support-weighted and macro means of the five per-class metrics.

    The weighted "accuracy" entry is the overall accuracy (total correct over
    total), which under support weighting is identical to weighted recall;
    weighting the per-class one-vs-rest accuracies instead would overstate
    multi-class accuracy through the shared true negatives.
    """
    if len(supports) != len(metrics.labels):
        raise MetricsError("supports not aligned with classes")
    if any(s <= 0 for s in supports):
        raise MetricsError("supports must be positive")
    w = np.asarray(supports, dtype=np.float64)
    w = w / w.sum()
    weighted = {
        metric: float(np.dot(w, metrics.of(metric))) for metric in METRIC_ORDER
    }
    weighted["accuracy"] = weighted["sensitivity"]
    macro = {metric: float(np.mean(metrics.of(metric))) for metric in METRIC_ORDER}
    return AggregateMetrics(weighted=weighted, macro=macro, supports=tuple(int(s) for s in supports))


# --- ROC / AUC -------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    positive_label: str
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_curve(scores: Sequence[float], labels: Sequence[str], positive_label: str) -> RocCurve:
    """Threshold sweep over unique scores, descending; trapezoidal AUC.

    Ties are grouped per unique score, which makes the trapezoidal area equal
    the pairwise-concordance AUC with ties counted half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray([1 if lab == positive_label else 0 for lab in labels], dtype=np.int64)
    if scores.shape != y.shape:
        raise MetricsError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError(f"need both classes to draw a ROC curve for {positive_label!r}")

    order = np.argsort(-scores, kind="stable")
    y_sorted = y[order]
    s_sorted = scores[order]
    # last index of each unique score value
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [len(y_sorted) - 1]])
    tps = np.cumsum(y_sorted)[cut]
    fps = 1 + cut - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(positive_label=positive_label, fpr=fpr, tpr=tpr, auc=auc)


def multiclass_roc(
    score_matrix: np.ndarray, labels: Sequence[str], class_labels: Sequence[str]
) -> tuple[dict[str, RocCurve], RocCurve]:
    """One-vs-rest curve per class plus a micro-averaged curve.

    `score_matrix` columns follow `class_labels`. A class absent from the
    label stream is omitted with a warning.
    """
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    if score_matrix.ndim != 2 or score_matrix.shape[1] != len(class_labels):
        raise MetricsError("score matrix shape does not match class labels")
    if len(class_labels) < 2:
        raise MetricsError("need at least two classes")
    curves: dict[str, RocCurve] = {}
    micro_scores: list[float] = []
    micro_truth: list[str] = []
    for j, cls in enumerate(class_labels):
        col = score_matrix[:, j]
        micro_scores.extend(col.tolist())
        micro_truth.extend("pos" if lab == cls else "neg" for lab in labels)
        if not any(lab == cls for lab in labels):
            logger.warning("class %s absent from labels; ROC curve omitted", cls)
            continue
        curves[cls] = roc_curve(col, list(labels), cls)
    micro = roc_curve(micro_scores, micro_truth, "pos")
    micro = RocCurve(positive_label="micro", fpr=micro.fpr, tpr=micro.tpr, auc=micro.auc)
    return curves, micro
