"""Pixel-level binary evaluation: ROC / PR curves, AuROC, AuPRC, FPR95.

Anomalies are the positive class.  A pixel is predicted positive when its
score is >= the threshold; thresholds sweep every distinct score in
descending order, so tied scores always move together.  AuROC uses
trapezoidal integration (validated against the Mann-Whitney pair
statistic); AuPRC is the right-continuous step sum (average precision),
which avoids the optimistic interpolation of a trapezoid on PR points.
"""

from dataclasses import dataclass

import numpy as np

from .tensorio import IGNORE_LABEL


@dataclass
class EvalSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 = anomaly


@dataclass
class CurveResult:
    thresholds: np.ndarray  # descending, leading +inf
    fpr: np.ndarray
    tpr: np.ndarray
    recall: np.ndarray  # per real threshold (thresholds[1:])
    precision: np.ndarray
    auroc: float
    auprc: float
    fpr95: float


def build_evalset(anomaly_maps, anomaly_masks, rois=None):
    """Flatten maps into (scores, labels), dropping ignore and out-of-ROI pixels."""
    scores = []
    labels = []
    if rois is None:
        rois = [None] * len(anomaly_maps)
    for amap, mask, roi in zip(anomaly_maps, anomaly_masks, rois):
        a = amap.a if hasattr(amap, "a") else np.asarray(amap)
        m = np.asarray(mask)
        keep = m != IGNORE_LABEL
        if roi is not None:
            keep &= np.asarray(roi) > 0
        scores.append(a[keep].astype(np.float64))
        labels.append((m[keep] == 1).astype(np.int8))
    scores = np.concatenate(scores) if scores else np.empty(0)
    labels = np.concatenate(labels) if labels else np.empty(0, dtype=np.int8)
    if scores.size == 0:
        raise ValueError("empty evaluation set")
    if labels.min() == labels.max():
        raise ValueError("single-class evaluation set")
    return EvalSet(scores, labels)


def roc_pr_curves(evalset):
    """Threshold sweep over distinct scores with all derived metrics."""
    scores = evalset.scores
    labels = evalset.labels
    if labels.min() == labels.max():
        raise ValueError("single-class evaluation set")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.float64)
    n_pos = float(y.sum())
    n_neg = float(len(y) - n_pos)
    # last index of each tie group
    distinct = np.nonzero(np.diff(s))[0]
    ends = np.append(distinct, len(s) - 1)
    tp = np.cumsum(y)[ends]
    fp = (ends + 1.0) - tp
    thresholds = s[ends]
    tpr = tp / n_pos
    fpr = fp / n_neg
    precision = tp / (tp + fp)
    recall = tpr
    fpr_full = np.concatenate([[0.0], fpr])
    tpr_full = np.concatenate([[0.0], tpr])
    auroc = float(np.trapezoid(tpr_full, fpr_full))
    auprc = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))
    reach = np.nonzero(tpr >= 0.95)[0]
    fpr95 = float(fpr[reach[0]]) if reach.size else 1.0
    return CurveResult(
        thresholds=np.concatenate([[np.inf], thresholds]),
        fpr=fpr_full,
        tpr=tpr_full,
        recall=recall,
        precision=precision,
        auroc=auroc,
        auprc=auprc,
        fpr95=fpr95,
    )


def auroc_mannwhitney(evalset):
    """Fraction of (anomaly, normal) pairs ranked correctly; ties count half.

    Independent oracle for the trapezoidal AuROC.
    """
    pos = evalset.scores[evalset.labels == 1]
    neg = evalset.scores[evalset.labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("single-class evaluation set")
    total = 0.0
    # chunk the outer loop to bound memory on big sets
    step = max(1, int(2e7) // max(1, neg.size))
    for i in range(0, pos.size, step):
        block = pos[i : i + step, None]
        total += float((block > neg[None, :]).sum())
        total += 0.5 * float((block == neg[None, :]).sum())
    return total / (pos.size * neg.size)
