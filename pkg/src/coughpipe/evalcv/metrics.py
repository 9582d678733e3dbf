"""Event-score aggregation, F1/accuracy, ROC, AUC and the triage check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WHO_SENSITIVITY = 0.90
WHO_SPECIFICITY = 0.70


def aggregate(per_frame_probs) -> np.ndarray:
    """Mean class probability over an event's frames (the event-level score)."""
    p = np.asarray(per_frame_probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.shape[0] == 0:
        raise ValueError("aggregate needs at least one frame")
    # a float mean of n equal values can be off by an ulp; constant columns are returned as is
    constant = p.min(axis=0) == p.max(axis=0)
    return np.where(constant, p[0], p.mean(axis=0))


@dataclass(frozen=True)
class EventScore:
    event_id: str
    patient_id: str
    true_label: int
    per_frame_probs: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.per_frame_probs, dtype=np.float64))
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError(f"{self.event_id}: frame probabilities must sum to 1")
        object.__setattr__(self, "per_frame_probs", p)

    @property
    def aggregated(self) -> np.ndarray:
        return aggregate(self.per_frame_probs)


def classify_event(aggregated, threshold: float | None = 0.5, positive: int = 1) -> int:
    """Two classes: positive iff its probability >= threshold. Otherwise argmax, lowest index on ties."""
    p = np.asarray(aggregated, dtype=np.float64)
    if p.size == 2 and threshold is not None:
        return positive if p[positive] >= threshold else 1 - positive
    return int(np.argmax(p))


def confusion_matrix(predictions, truths, n_classes: int | None = None) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), true.max(initial=0))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def f1_score(predictions, truths, mode: str = "positive", positive: int = 1,
             n_classes: int | None = None) -> float:
    """Positive-class F1 ``2TP/(2TP+FP+FN)`` or the unweighted macro mean over classes.

    In macro mode a class without support or predictions scores 0.
    """
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValueError("predictions and truths differ in length")
    if pred.size == 0:
        raise ValueError("f1_score of empty input")
    if mode == "positive":
        tp = np.sum((pred == positive) & (true == positive))
        fp = np.sum((pred == positive) & (true != positive))
        fn = np.sum((pred != positive) & (true == positive))
        denom = 2 * tp + fp + fn
        return float(2 * tp / denom) if denom else 0.0
    if mode == "macro":
        cm = confusion_matrix(pred, true, n_classes)
        tp = np.diag(cm).astype(np.float64)
        denom = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
        per_class = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
        return float(per_class.mean())
    raise ValueError(f"unknown F1 mode {mode!r}")


def accuracy(predictions, truths) -> float:
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.size == 0:
        raise ValueError("accuracy of empty input")
    return float(np.mean(pred == true))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, truths, positive: int = 1) -> RocCurve:
    """Sweep thresholds over the unique scores in descending order.

    A point at threshold ``t`` classifies ``score >= t`` as positive. The curve
    starts at (0, 0) with threshold ``+inf`` and ends at (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truths) == positive
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]])


def auc(roc: RocCurve) -> float:
    """Trapezoidal area under the ROC points."""
    return float(np.sum(np.diff(roc.fpr) * (roc.tpr[1:] + roc.tpr[:-1]) / 2.0))


def sensitivity_at_specificity(roc: RocCurve, target_specificity: float) -> float:
    """Best sensitivity with false-positive rate <= 1 - target.

    Between two adjacent ROC points straddling the target rate the curve is
    interpolated linearly.
    """
    if not 0.0 <= target_specificity <= 1.0:
        raise ValueError("target specificity must lie in [0, 1]")
    limit = 1.0 - target_specificity
    fpr, tpr = roc.fpr, roc.tpr
    best = float(tpr[fpr <= limit + 1e-15].max(initial=0.0))
    for k in range(len(fpr) - 1):
        a, b = fpr[k], fpr[k + 1]
        if a < limit < b:
            best = max(best, float(tpr[k] + (tpr[k + 1] - tpr[k]) * (limit - a) / (b - a)))
    return best


@dataclass(frozen=True)
class TriageResult:
    passed: bool
    sensitivity: float
    specificity: float = WHO_SPECIFICITY
    required_sensitivity: float = WHO_SENSITIVITY


def who_triage_check(roc: RocCurve) -> TriageResult:
    """Pass iff sensitivity at 70% specificity reaches 90% (boundary inclusive)."""
    sens = sensitivity_at_specificity(roc, WHO_SPECIFICITY)
    return TriageResult(sens >= WHO_SENSITIVITY, sens)
