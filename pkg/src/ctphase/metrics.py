"""Confusion matrices, one-vs-rest metrics, AUC, McNemar tests and pseudo pi_time."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .labels import CLASS_NAMES, MERGED_CLASS_NAMES

PI_TIME_ANCHORS = (0.0, 30.0, 70.0, 180.0)  # seconds for non_contrast, arterial, venous, delayed


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_order: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(truth, pred, n_classes: int, class_order: Sequence[str] | None = None) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError(f"truth and pred lengths differ ({truth.size} vs {pred.size})")
    if truth.size and (min(truth.min(), pred.min()) < 0 or max(truth.max(), pred.max()) >= n_classes):
        raise ValueError(f"class codes must lie in 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    if class_order is None:
        class_order = CLASS_NAMES if n_classes == len(CLASS_NAMES) else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, tuple(class_order))


@dataclass(frozen=True)
class ClassMetrics:
    sensitivity: float
    specificity: float
    ppv: float
    f1: float
    per_class_accuracy: float  # recall, matching how per-class accuracy is tabulated
    ovr_accuracy: float  # (TP + TN) / total
    auc: float | None = None


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def per_class_metrics(cm: ConfusionMatrix, k: int) -> ClassMetrics:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = counts[k, k]
    fn = counts[k].sum() - tp
    fp = counts[:, k].sum() - tp
    tn = total - tp - fn - fp
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    ppv = _ratio(tp, tp + fp)
    f1 = _ratio(2 * ppv * sens, ppv + sens)
    return ClassMetrics(
        sensitivity=float(sens),
        specificity=float(spec),
        ppv=float(ppv),
        f1=float(f1),
        per_class_accuracy=float(sens),
        ovr_accuracy=float((tp + tn) / total),
    )


def roc_auc_ovr(scores, truth) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Returns NaN when ``truth`` holds only one class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    pos, neg = scores[truth], np.sort(scores[~truth])
    if pos.size == 0 or neg.size == 0:
        return math.nan
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    # wins + ties/2 stays a half-integer, so this is exact before the division
    concordant = int(below.sum()) + 0.5 * int((upto - below).sum())
    return concordant / (pos.size * neg.size)


def roc_points(scores, truth) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) triples for plotting, from the top threshold down."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    P, N = truth.sum(), (~truth).sum()
    points = [(math.inf, 0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        hit = scores >= thr
        points.append((float(thr), _ratio((hit & ~truth).sum(), N), _ratio((hit & truth).sum(), P)))
    return points


def overall_accuracy(truth, pred) -> float:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.size == 0:
        raise ValueError("no samples")
    if truth.shape != pred.shape:
        raise ValueError("truth and pred lengths differ")
    return float(np.mean(truth == pred))


# ---------------------------------------------------------------------------
# label harmonization


def merge_arterial_venous_labels(labels) -> np.ndarray:
    """4-class codes to {0: non_contrast, 1: arterial_venous, 2: delayed}."""
    return np.array([0, 1, 1, 2])[np.asarray(labels, dtype=np.int64)]


def merge_probabilities(probabilities) -> np.ndarray:
    p = np.asarray(probabilities, dtype=np.float64)
    return np.stack([p[..., 0], p[..., 1] + p[..., 2], p[..., 3]], axis=-1)


def harmonize_c4kc(probabilities) -> tuple[np.ndarray, np.ndarray]:
    """Merged 3-class probabilities and their argmax (lowest class on ties)."""
    merged = merge_probabilities(probabilities)
    return merged, np.argmax(merged, axis=-1)


# ---------------------------------------------------------------------------
# McNemar


@dataclass(frozen=True)
class McNemarResult:
    b: int  # model 1 right, model 2 wrong
    c: int  # model 1 wrong, model 2 right
    statistic: float
    p_value: float
    n_samples: int  # samples of the tested class; 0 means the test had no data at all

    @property
    def defined(self) -> bool:
        return not math.isnan(self.statistic)


def mcnemar_from_counts(b: int, c: int, n_samples: int | None = None) -> McNemarResult:
    n = b + c if n_samples is None else n_samples
    if b + c == 0:
        return McNemarResult(b, c, math.nan, math.nan, n)
    stat = (abs(b - c) - 1) ** 2 / (b + c)
    return McNemarResult(b, c, float(stat), float(chi2.sf(stat, 1)), n)


def mcnemar_per_class(truth, pred_1, pred_2, k: int) -> McNemarResult:
    """Continuity-corrected McNemar test on the samples whose true class is ``k``."""
    truth = np.asarray(truth)
    pred_1 = np.asarray(pred_1)
    pred_2 = np.asarray(pred_2)
    if not (truth.shape == pred_1.shape == pred_2.shape):
        raise ValueError("truth and both prediction vectors must have equal length")
    rows = truth == k
    ok_1 = pred_1[rows] == k
    ok_2 = pred_2[rows] == k
    b = int(np.sum(ok_1 & ~ok_2))
    c = int(np.sum(~ok_1 & ok_2))
    return mcnemar_from_counts(b, c, int(rows.sum()))


# ---------------------------------------------------------------------------
# pseudo pi_time


def pseudo_pi_time(probabilities, anchors: Sequence[float] = PI_TIME_ANCHORS, atol: float = 1e-6):
    """Probability-weighted mean of the phase anchor times, in seconds."""
    p = np.asarray(probabilities, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    if p.shape[-1] != a.size:
        raise ValueError(f"expected {a.size} class probabilities, got {p.shape[-1]}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("probability rows must be non-negative and sum to 1")
    return p @ a


# ---------------------------------------------------------------------------
# reports


def evaluation_report(truth, probabilities, dataset: str = "", merge_arterial_venous: bool = False) -> dict:
    """Confusion matrix, per-class metrics and accuracy as a JSON-ready dict.

    A class absent from ``truth`` has an undefined AUC; it is reported as 0.5
    with ``auc_defined: false``.
    """
    truth = np.asarray(truth, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    names = CLASS_NAMES
    if merge_arterial_venous:
        truth = merge_arterial_venous_labels(truth)
        probs = merge_probabilities(probs)
        names = MERGED_CLASS_NAMES
    pred = np.argmax(probs, axis=1)
    K = len(names)
    cm = confusion(truth, pred, K, names)
    per_class = {}
    for k, name in enumerate(names):
        m = per_class_metrics(cm, k)
        auc = roc_auc_ovr(probs[:, k], truth == k)
        per_class[name] = {
            "auc": 0.5 if math.isnan(auc) else auc,
            "auc_defined": not math.isnan(auc),
            "sensitivity": m.sensitivity,
            "specificity": m.specificity,
            "ppv": m.ppv,
            "f1": m.f1,
            "accuracy": m.per_class_accuracy,
            "ovr_accuracy": m.ovr_accuracy,
        }
    return {
        "dataset": dataset,
        "class_order": list(names),
        "confusion": cm.counts.tolist(),
        "per_class": per_class,
        "overall_accuracy": overall_accuracy(truth, pred),
        "n_samples": int(truth.size),
    }
