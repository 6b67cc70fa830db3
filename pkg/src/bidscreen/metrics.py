"""Classification metrics with the collusive class as positive.

The confusion matrix is laid out rows = actual, columns = predicted, both
ordered [competitive, collusive]:

    [[tn, fp],
     [fn, tp]]

Accuracy, balanced accuracy and F1 are plain count ratios; ROC-AUC is the
Mann-Whitney rank statistic (probability that a random collusive tender
outscores a random competitive one, ties counted half), with a
trapezoidal-curve implementation kept alongside as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import Label


class MetricError(Exception):
    """Metric undefined on this input (empty class, unknown label, ...)."""


def _codes(labels) -> np.ndarray:
    out = []
    for lab in labels:
        if isinstance(lab, str):
            lab = Label.from_string(lab)
        if lab is Label.UNKNOWN:
            raise MetricError("unknown label in evaluation input")
        out.append(1 if lab is Label.COLLUSIVE else 0)
    return np.asarray(out, dtype=np.int64)


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int  # competitive predicted competitive
    fp: int  # competitive predicted collusive
    fn: int  # collusive predicted competitive
    tp: int  # collusive predicted collusive

    @property
    def n(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def as_table(self) -> list[list[int]]:
        """Rows actual [competitive, collusive] x columns predicted ditto."""
        return [[self.tn, self.fp], [self.fn, self.tp]]

    @classmethod
    def from_table(cls, table) -> "ConfusionMatrix":
        (tn, fp), (fn, tp) = table
        return cls(tn=int(tn), fp=int(fp), fn=int(fn), tp=int(tp))


def confusion(labels, predictions) -> ConfusionMatrix:
    y = _codes(labels)
    p = _codes(predictions)
    if y.size == 0 or y.size != p.size:
        raise MetricError(f"labels/predictions length mismatch: {y.size} vs {p.size}")
    return ConfusionMatrix(
        tn=int(np.sum((y == 0) & (p == 0))),
        fp=int(np.sum((y == 0) & (p == 1))),
        fn=int(np.sum((y == 1) & (p == 0))),
        tp=int(np.sum((y == 1) & (p == 1))),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.n == 0:
        raise MetricError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.n


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean of the per-class recalls; undefined when a class is absent."""
    pos, neg = cm.tp + cm.fn, cm.tn + cm.fp
    if pos == 0 or neg == 0:
        raise MetricError("balanced accuracy undefined: a class is absent")
    return 0.5 * (cm.tp / pos + cm.tn / neg)


def f1(cm: ConfusionMatrix) -> float:
    """Harmonic mean of precision and recall for the collusive class."""
    denom = 2 * cm.tp + cm.fp + cm.fn
    if denom == 0:
        raise MetricError("F1 undefined: no collusive truth or prediction")
    return 2 * cm.tp / denom


def _check_scores(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = _codes(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.size != s.size:
        raise MetricError(f"labels/scores length mismatch: {y.size} vs {s.size}")
    if not np.any(y == 1) or not np.any(y == 0):
        raise MetricError("ROC-AUC undefined: both classes must be present")
    return y, s


def roc_auc(labels, scores) -> float:
    """Rank (Mann-Whitney) ROC-AUC of collusive-class scores, ties at 0.5."""
    y, s = _check_scores(labels, scores)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc_trapezoid(labels, scores) -> float:
    """Area under the ROC curve by trapezoidal sweep (tie groups collapsed);
    agrees with the rank formulation to machine precision."""
    y, s = _check_scores(labels, scores)
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos

    area = 0.0
    tp = fp = 0
    prev_tpr = prev_fpr = 0.0
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(np.sum(y_sorted[i:j + 1] == 1))
        fp += (j - i + 1) - int(np.sum(y_sorted[i:j + 1] == 1))
        tpr, fpr = tp / n_pos, fp / n_neg
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        prev_tpr, prev_fpr = tpr, fpr
        i = j + 1
    return area


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    balanced_accuracy: float
    f1: float
    roc_auc: float
    confusion: ConfusionMatrix
    n: int

    def to_dict(self) -> dict:
        return {
            "acc": self.accuracy,
            "bal_acc": self.balanced_accuracy,
            "f1": self.f1,
            "roc_auc": self.roc_auc,
            "conf": self.confusion.as_table(),
        }


def evaluate(labels, collusive_probs, threshold: float = 0.5) -> EvalReport:
    """Full report for one held-out market: class decisions at ``threshold``
    on the collusive-class probability, plus rank ROC-AUC."""
    y = _codes(labels)
    s = np.asarray(collusive_probs, dtype=np.float64)
    preds = [Label.COLLUSIVE if p > threshold else Label.COMPETITIVE for p in s]
    cm = confusion([Label.COLLUSIVE if c else Label.COMPETITIVE for c in y], preds)
    return EvalReport(
        accuracy=accuracy(cm),
        balanced_accuracy=balanced_accuracy(cm),
        f1=f1(cm),
        roc_auc=roc_auc(labels, s),
        confusion=cm,
        n=cm.n,
    )
