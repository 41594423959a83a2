"""Segment-level machinery.

Segments are maximal 8-connected regions of equal label.  Each predicted
segment gets a fixed 12-feature metric vector (dispersion, geometry,
location) from the softmax output; a logistic-regression meta classifier
trained on these metrics predicts whether a segment is a false positive
(true IoU = 0) and is used to discard such segments.
"""

import math
from dataclasses import dataclass

import numpy as np

from .kernels import label_components
from .tensorio import IGNORE_LABEL

N_METRICS = 12
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class Segment:
    index: int
    class_label: int
    rows: np.ndarray
    cols: np.ndarray
    shape: tuple
    neighbor_classes: int = 0
    metrics: np.ndarray | None = None
    pred_prob: float | None = None
    true_iou: float | None = None

    @property
    def size(self):
        return self.rows.shape[0]

    def mask(self):
        m = np.zeros(self.shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m


def connected_components(label_map, connectivity=8):
    """Maximal same-label regions, ordered by (min row, min col).

    Ignore pixels (255) belong to no segment; the remaining segments
    partition the non-ignore pixels.
    """
    lab = np.asarray(label_map)
    comp, count = label_components(
        lab.astype(np.int32), IGNORE_LABEL, connectivity=connectivity
    )
    if count == 0:
        return []
    flat = comp.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    starts = np.searchsorted(sorted_ids, np.arange(count), side="left")
    ends = np.searchsorted(sorted_ids, np.arange(count), side="right")
    h, w = lab.shape
    segments = []
    for i in range(count):
        idx = order[starts[i] : ends[i]]
        rows = idx // w
        cols = idx % w
        seg = Segment(i, int(lab[rows[0], cols[0]]), rows, cols, (h, w))
        seg.neighbor_classes = _count_neighbor_classes(lab, comp, i, rows, cols)
        segments.append(seg)
    return segments


def _count_neighbor_classes(lab, comp, comp_id, rows, cols):
    h, w = lab.shape
    seen = set()
    for dr, dc in _OFFSETS:
        rr = rows + dr
        cc = cols + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        if not ok.any():
            continue
        vals = lab[rr[ok], cc[ok]]
        outside = comp[rr[ok], cc[ok]] != comp_id
        for v in np.unique(vals[outside]):
            if v != IGNORE_LABEL:
                seen.add(int(v))
    return len(seen)


def segment_iou(segment, gt_class_mask):
    """IoU of one segment against the union of same-class ground truth."""
    gt = np.asarray(gt_class_mask, dtype=bool)
    inter = int(gt[segment.rows, segment.cols].sum())
    union = segment.size + int(gt.sum()) - inter
    return inter / union if union else 0.0


def _boundary_split(segment):
    h, w = segment.shape
    inside = segment.mask()
    boundary = np.zeros(segment.size, dtype=bool)
    for dr, dc in _OFFSETS:
        rr = segment.rows + dr
        cc = segment.cols + dc
        off_image = (rr < 0) | (rr >= h) | (cc < 0) | (cc >= w)
        neigh_out = np.ones(segment.size, dtype=bool)
        ok = ~off_image
        neigh_out[ok] = ~inside[rr[ok], cc[ok]]
        boundary |= off_image | neigh_out
    return boundary


def segment_metrics(segment, softmax):
    """Fixed 12-vector of dispersion, geometry and location features."""
    s = softmax.shape[-1]
    p = softmax[segment.rows, segment.cols]
    ent = -(p * np.log(np.maximum(p, 1e-12))).sum(axis=-1) / math.log(s)
    top2 = np.partition(p, -2, axis=-1)
    margin = 1.0 - top2[..., -1] + top2[..., -2]
    msp = p.max(axis=-1)
    boundary = _boundary_split(segment)
    n_bd = int(boundary.sum())
    interior = ~boundary
    bd_ent = float(ent[boundary].mean()) if n_bd else 0.0
    in_ent = float(ent[interior].mean()) if interior.any() else bd_ent
    h, w = segment.shape
    vec = np.array(
        [
            float(ent.mean()),
            float(ent.var()),
            float(margin.mean()),
            float(margin.var()),
            float(msp.mean()),
            float(segment.size),
            math.log(segment.size),
            n_bd / segment.size,
            bd_ent - in_ent,
            float(segment.rows.mean()) / max(h - 1, 1),
            float(segment.cols.mean()) / max(w - 1, 1),
            float(segment.neighbor_classes),
        ]
    )
    segment.metrics = vec
    return vec


@dataclass
class MetaModel:
    weights: np.ndarray
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray
    keep: np.ndarray  # columns with nonzero spread

    def predict_proba(self, metrics):
        x = (np.atleast_2d(metrics)[:, self.keep] - self.feat_mean) / self.feat_std
        return 1.0 / (1.0 + np.exp(-(x @ self.weights + self.bias)))


def logistic_loss_grad(weights, bias, x, y):
    """Mean logistic loss and its gradient (weights, bias)."""
    z = x @ weights + bias
    p = 1.0 / (1.0 + np.exp(-z))
    pc = np.clip(p, 1e-12, 1.0 - 1e-12)
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())
    r = (p - y) / len(y)
    return loss, x.T @ r, float(r.sum())


def meta_fit(segments, seed=0, iters=500, lr=0.1):
    """Logistic regression on standardized metrics, label 1{IoU > 0}.

    Full-batch gradient descent from zero weights is deterministic; the
    seed parameter is kept for interface stability only.
    """
    x = np.stack([s.metrics for s in segments])
    y = np.array([1.0 if s.true_iou > 0 else 0.0 for s in segments])
    if y.min() == y.max():
        raise ValueError("meta training needs both outcomes (IoU=0 and IoU>0)")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    keep = std > 0
    xs = (x[:, keep] - mean[keep]) / std[keep]
    w = np.zeros(int(keep.sum()))
    b = 0.0
    for _ in range(iters):
        _, dw, db = logistic_loss_grad(w, b, xs, y)
        w -= lr * dw
        b -= lr * db
    return MetaModel(w, b, mean[keep], std[keep], keep)


def meta_apply(model, segments):
    """Keep segments predicted as true positives (p[IoU>0] >= 0.5)."""
    if not segments:
        return []
    probs = model.predict_proba(np.stack([s.metrics for s in segments]))
    kept = []
    for seg, prob in zip(segments, probs):
        seg.pred_prob = float(prob)
        if prob >= 0.5:
            kept.append(seg)
    return kept


def anomaly_segments(anomaly_map, tau, gt_mask=None, softmax=None):
    """Thresholded anomaly mask components; optionally with metrics and IoU."""
    a = anomaly_map.a if hasattr(anomaly_map, "a") else np.asarray(anomaly_map)
    pred = (a >= tau).astype(np.uint8)
    if gt_mask is not None:
        pred[np.asarray(gt_mask) == IGNORE_LABEL] = 0
    segs = [s for s in connected_components(pred) if s.class_label == 1]
    gt_pos = None if gt_mask is None else (np.asarray(gt_mask) == 1)
    for seg in segs:
        if softmax is not None:
            segment_metrics(seg, softmax)
        if gt_pos is not None:
            seg.true_iou = segment_iou(seg, gt_pos)
    return segs


def object_level_eval(
    anomaly_maps, tau, gt_masks, meta_model=None, softmax_maps=None, delta=float("nan")
):
    """Object-level FP / FN / F1 of thresholded anomaly masks.

    FP: predicted segment with zero IoU against ground-truth anomaly
    pixels.  FN: ground-truth anomaly component that no predicted pixel
    touches.  With a meta model, segments predicted as false positives are
    discarded before counting.
    """
    if meta_model is not None and softmax_maps is None:
        raise ValueError("meta filtering needs softmax maps")
    fp = fn = tp = 0
    for i, (amap, gt) in enumerate(zip(anomaly_maps, gt_masks)):
        softmax = softmax_maps[i] if softmax_maps is not None else None
        segs = anomaly_segments(amap, tau, gt_mask=gt, softmax=softmax)
        if meta_model is not None:
            segs = meta_apply(meta_model, segs)
        for seg in segs:
            if seg.true_iou > 0:
                tp += 1
            else:
                fp += 1
        kept_pixels = np.zeros(np.asarray(gt).shape, dtype=bool)
        for seg in segs:
            kept_pixels[seg.rows, seg.cols] = True
        gt_arr = np.asarray(gt)
        gt_comp = [s for s in connected_components((gt_arr == 1).astype(np.uint8)) if s.class_label == 1]
        for comp in gt_comp:
            if not kept_pixels[comp.rows, comp.cols].any():
                fn += 1
    f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return {"fp": fp, "fn": fn, "tp": tp, "f1": f1, "delta": delta}


def confusion_matrix(pred_masks, gt_masks, n_classes):
    """Pixel confusion over non-ignore pixels; rows = ground truth."""
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pred, gt in zip(pred_masks, gt_masks):
        p = np.asarray(pred).reshape(-1).astype(np.int64)
        g = np.asarray(gt).reshape(-1).astype(np.int64)
        ok = (g != IGNORE_LABEL) & (g < n_classes) & (p < n_classes)
        np.add.at(conf, (g[ok], p[ok]), 1)
    return conf


def class_stats(conf):
    """Per-class IoU, precision, recall from a confusion matrix."""
    tp = np.diag(conf).astype(np.float64)
    gt_tot = conf.sum(axis=1).astype(np.float64)
    pred_tot = conf.sum(axis=0).astype(np.float64)
    union = gt_tot + pred_tot - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, 0.0)
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(gt_tot > 0, tp / gt_tot, 0.0)
    return {"iou": iou, "precision": precision, "recall": recall}
