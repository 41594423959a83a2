"""Unsupervised discovery of a novel class and its pseudo labels.

Pipeline: threshold anomaly maps into connected components, embed each
component's image crop with the classifier's hidden features, reduce with
PCA (cyclic Jacobi eigendecomposition) and t-SNE to two dimensions,
cluster with DBSCAN, select the densest sufficiently-large cluster and
relabel its pixels with the new class index.  Rehearsal quotas decide
which old training images accompany the pseudo-labeled set.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import bilinear_resize
from .rng import SplitMix64, derive_seed
from .toynet import forward

MIN_COMPONENT_PIXELS = 10


@dataclass
class AnomalyComponent:
    source: int  # index of the originating image
    rows: np.ndarray
    cols: np.ndarray
    bbox: tuple  # (r0, c0, r1, c1) inclusive
    crop: np.ndarray  # (h, w, 3) image restricted to bbox
    feature: np.ndarray | None = None

    @property
    def size(self):
        return self.rows.shape[0]


def extract_components(
    anomaly_maps,
    images,
    tau,
    min_size=MIN_COMPONENT_PIXELS,
    softmax_maps=None,
    meta_model=None,
):
    """8-connected components of thresholded score maps, as image crops.

    With a meta model (and the softmax maps its metrics need), components
    classified as false positives are dropped before cropping.
    """
    from .segments import connected_components, meta_apply, segment_metrics

    if meta_model is not None and softmax_maps is None:
        raise ValueError("meta filtering needs softmax maps")
    out = []
    for idx, (amap, image) in enumerate(zip(anomaly_maps, images)):
        a = amap.a if hasattr(amap, "a") else np.asarray(amap)
        binary = (a >= tau).astype(np.uint8)
        segs = [
            s
            for s in connected_components(binary)
            if s.class_label == 1 and s.size >= min_size
        ]
        if meta_model is not None:
            for seg in segs:
                segment_metrics(seg, softmax_maps[idx])
            segs = meta_apply(meta_model, segs)
        for seg in segs:
            r0, r1 = int(seg.rows.min()), int(seg.rows.max())
            c0, c1 = int(seg.cols.min()), int(seg.cols.max())
            crop = np.asarray(image)[r0 : r1 + 1, c0 : c1 + 1, :].copy()
            out.append(
                AnomalyComponent(idx, seg.rows, seg.cols, (r0, c0, r1, c1), crop)
            )
    return out


def _resize_crop(crop, side=16):
    h, w, c = crop.shape
    if crop.size == 0:
        raise ValueError("empty crop")
    out = np.empty((side, side, c))
    for ch in range(c):
        out[:, :, ch] = bilinear_resize(np.ascontiguousarray(crop[:, :, ch]), side, side)
    return out


def embed_crops(components, params, side=16):
    """Feature vector per component: spatial mean of the hidden features
    of the crop resized to a fixed side.

    The mean runs over pixels with a full receptive field (no zero
    padding), so a constant crop embeds exactly as any one of its pixels.
    """
    vectors = []
    pad = params.k // 2
    for comp in components:
        resized = _resize_crop(comp.crop, side)
        _, feats = forward(params, resized)
        inner = feats[pad : side - pad, pad : side - pad, :]
        vec = inner.reshape(-1, feats.shape[-1]).mean(axis=0)
        comp.feature = vec
        vectors.append(vec)
    return np.stack(vectors) if vectors else np.empty((0, params.hidden))


# ---------------------------------------------------------------------------
# PCA via cyclic Jacobi
# ---------------------------------------------------------------------------


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigenvalues/vectors of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(float((a * a).sum() - (np.diag(a) ** 2).sum()))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    evals = np.diag(a).copy()
    order = np.argsort(-evals)
    return evals[order], v[:, order]


def pca_reduce(vectors, d_target):
    """Center, decorrelate, project onto the leading d_target directions.

    Eigenvector signs are fixed so the first nonzero coordinate of each is
    positive.  Returns (projected, all eigenvalues descending).
    """
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    if n <= d_target:
        raise ValueError("need more samples than target dimensions")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / (n - 1)
    evals, evecs = jacobi_eigh(cov)
    for j in range(evecs.shape[1]):
        col = evecs[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            evecs[:, j] = -col
    return centered @ evecs[:, :d_target], evals


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------


@dataclass
class Embedding2D:
    points: np.ndarray  # (n, 2)
    kl_trace: list = field(default_factory=list)


def _sq_dists(x):
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _conditional_probs(dists, perplexity, tol=1e-5, max_steps=50):
    """Per-point bisection on the Gaussian precision to match perplexity."""
    n = dists.shape[0]
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dists[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_steps):
            w = np.exp(-beta * d)
            sw = w.sum()
            if sw <= 0:
                h = 0.0
            else:
                pj = w / sw
                h = math.log(sw) + beta * float((d * pj).sum())
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:  # entropy too high -> sharpen
                lo = beta
                beta = beta * 2.0 if not np.isfinite(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        w = np.exp(-beta * d)
        row = np.zeros(n)
        row[np.arange(n) != i] = w / w.sum()
        p[i] = row
    return p


def _kl(p, q):
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def kl_divergence_grad(p, points):
    """KL(P || Q(points)) and its exact gradient in the embedding space."""
    num = 1.0 / (1.0 + _sq_dists(points))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    np.fill_diagonal(q, 0.0)
    w = (p - q) * num
    grad = 4.0 * ((np.diag(w.sum(axis=1)) - w) @ points)
    return _kl(p, q), grad


def tsne(
    vectors,
    perplexity=8.0,
    iters=600,
    lr=100.0,
    seed=0,
    exaggeration=12.0,
    exaggeration_iters=250,
    momentum_switch=250,
):
    """Two-dimensional embedding minimizing KL(P || Q) with a Student-t Q."""
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n < 3 * perplexity:
        raise ValueError("perplexity infeasible for this sample count")
    cond = _conditional_probs(_sq_dists(x), perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    np.fill_diagonal(p, 0.0)

    rng = SplitMix64(derive_seed(seed, "tsne"))
    y = rng.normals(n * 2).reshape(n, 2) * 1e-4
    vel = np.zeros_like(y)
    trace = []
    for it in range(iters):
        kl, grad = kl_divergence_grad(p, y)
        trace.append(kl)
        if it < exaggeration_iters:
            _, grad = kl_divergence_grad(p * exaggeration, y)
        momentum = 0.5 if it < momentum_switch else 0.8
        vel = momentum * vel - lr * grad
        y = y + vel
        y = y - y.mean(axis=0)
    kl, _ = kl_divergence_grad(p, y)
    trace.append(kl)
    return Embedding2D(y, trace)


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

NOISE = 0


@dataclass
class ClusterSet:
    labels: np.ndarray  # 0 = noise, clusters numbered 1..n_clusters
    density: np.ndarray  # per-point neighbor count (incl. self)
    core: np.ndarray  # bool
    n_clusters: int

    def members(self, cluster_id):
        return np.nonzero(self.labels == cluster_id)[0]


def dbscan(points, eps, min_neighbors):
    """Density clustering: cores, borders and noise with pinned tie rules.

    A point is core when its strict eps-ball holds at least min_neighbors
    points (itself included).  Clusters are connected cores plus their
    border points; a border point reachable from several clusters joins
    the cluster of its lowest-index core neighbor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_neighbors < 1:
        raise ValueError("min_neighbors must be at least 1")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        return ClusterSet(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, bool), 0)
    d = np.sqrt(_sq_dists(pts))
    near = d < eps
    rho = near.sum(axis=1)
    core = rho >= min_neighbors
    labels = np.zeros(n, dtype=np.int64)
    cluster_id = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        cluster_id += 1
        stack = [i]
        labels[i] = cluster_id
        while stack:
            j = stack.pop()
            for kk in np.nonzero(near[j] & core)[0]:
                if labels[kk] == NOISE:
                    labels[kk] = cluster_id
                    stack.append(int(kk))
    # border points: lowest-index core neighbor decides
    for i in range(n):
        if core[i] or labels[i] != NOISE:
            continue
        neigh_cores = np.nonzero(near[i] & core)[0]
        if neigh_cores.size:
            labels[i] = labels[neigh_cores[0]]
    return ClusterSet(labels, rho.astype(np.float64), core, cluster_id)


def select_cluster(clusters, statistic="max", min_size=1):
    """Cluster with the highest density statistic among those of min size.

    Ties prefer the larger cluster, then the lower cluster index.
    """
    if statistic not in ("max", "average"):
        raise ValueError("statistic must be 'max' or 'average'")
    best = None
    for cid in range(1, clusters.n_clusters + 1):
        members = clusters.members(cid)
        if members.size < min_size:
            continue
        rho = clusters.density[members]
        stat = float(rho.max()) if statistic == "max" else float(rho.mean())
        key = (stat, members.size, -cid)
        if best is None or key > best[0]:
            best = (key, cid)
    if best is None:
        raise ValueError("no qualifying cluster")
    return best[1]


def pseudo_labels(pred_mask, components, new_class):
    """Copy of the predicted mask with component pixels set to the new class."""
    out = np.asarray(pred_mask).copy()
    for comp in components:
        out[comp.rows, comp.cols] = new_class
    return out


def build_pseudo_label_set(pred_masks, components, new_class):
    """Group components by source image; returns {image index: pseudo mask}."""
    by_img = {}
    for comp in components:
        by_img.setdefault(comp.source, []).append(comp)
    return {
        idx: pseudo_labels(pred_masks[idx], comps, new_class)
        for idx, comps in by_img.items()
    }


# ---------------------------------------------------------------------------
# rehearsal quotas
# ---------------------------------------------------------------------------


def rehearsal_quota(
    pred_masks, pseudo_masks, new_class, n_classes, train_presence, seed=0, n_target=None
):
    """Class frequencies on relabeled pixels and a quota-satisfying sample.

    nu_tot[s] counts pixels predicted s that received the new class; the
    returned subset of old training images (indices into train_presence)
    has size n_target and contains at least ceil(nu_rel[s] * n_target)
    images featuring class s, with quotas relaxed greedily (largest first)
    when infeasible.
    """
    nu_tot = np.zeros(n_classes, dtype=np.int64)
    for pred, pseudo in zip(pred_masks, pseudo_masks):
        relabeled = np.asarray(pseudo) == new_class
        if not relabeled.any():
            continue
        vals, counts = np.unique(np.asarray(pred)[relabeled], return_counts=True)
        for v, c in zip(vals, counts):
            if v < n_classes:
                nu_tot[v] += c
    total = int(nu_tot.sum())
    if total == 0:
        raise ValueError("zero relabeled pixels")
    nu_rel = nu_tot / total

    if n_target is None:
        n_target = len(pseudo_masks)
    n_train = len(train_presence)
    n_target = min(n_target, n_train)
    quotas = np.ceil(nu_rel * n_target).astype(np.int64)
    have = np.array(
        [sum(1 for pres in train_presence if s in pres) for s in range(n_classes)]
    )
    quotas = np.minimum(quotas, have)

    rng = SplitMix64(derive_seed(seed, "rehearsal"))
    while True:
        for _ in range(200):
            order = list(range(n_train))
            rng.shuffle(order)
            chosen = order[:n_target]
            counts = np.zeros(n_classes, dtype=np.int64)
            for idx in chosen:
                for s in train_presence[idx]:
                    if s < n_classes:
                        counts[s] += 1
            if (counts >= quotas).all():
                return nu_rel, quotas, sorted(chosen)
        if quotas.max() == 0:
            return nu_rel, quotas, sorted(chosen)
        quotas[int(np.argmax(quotas))] -= 1
