"""ROC curves, AUC and fixed-threshold operating points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPERATING_THRESHOLD = 0.5


@dataclass
class Metrics:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] yields (fpr[i], tpr[i]); first is +inf
    auc: float
    sensitivity: float
    specificity: float
    scores: np.ndarray
    labels: np.ndarray

    def report(self, mean_infer_s: float | None = None) -> str:
        lines = [f"auc={self.auc:.6f}", f"sens@0.5={self.sensitivity:.6f}", f"spec@0.5={self.specificity:.6f}"]
        if mean_infer_s is not None:
            lines.append(f"mean_infer_s={mean_infer_s:.4f}")
        return "\n".join(lines) + "\n"


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise ValueError("ROC needs at least one positive and one negative label")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels


def roc_curve(scores, labels):
    """ROC points for thresholds at every distinct score (predict positive when ``score >= t``)."""
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr, np.r_[np.inf, s[last]]


def roc_auc(scores, labels, threshold: float = OPERATING_THRESHOLD) -> Metrics:
    """Threshold-swept ROC, trapezoidal AUC and sensitivity/specificity at ``threshold``."""
    scores, labels = _check(scores, labels)
    fpr, tpr, thr = roc_curve(scores, labels)
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2)
    pred = scores >= threshold
    sens = float(np.mean(pred[labels == 1]))
    spec = float(np.mean(~pred[labels == 0]))
    return Metrics(fpr, tpr, thr, auc, sens, spec, scores, labels)


def mann_whitney_auc(scores, labels) -> float:
    """Brute-force pairwise AUC: (concordant + ties / 2) / (n_pos * n_neg)."""
    scores, labels = _check(scores, labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)
