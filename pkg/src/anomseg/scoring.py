"""Per-pixel anomaly score maps.

Every scorer returns an AnomalyMap whose values grow with anomality.
Scores that live on probabilities (msp, entropy, margin, void) are in
[0, 1]; distance- and likelihood-based scores are unbounded above.
"""

from dataclasses import dataclass, field

import numpy as np

from . import infostat
from .kernels import bilinear_resize
from .toynet import forward, input_gradient, softmax_map

LOG_CLAMP = 1e-12


@dataclass
class AnomalyMap:
    a: np.ndarray  # (H, W), higher = more anomalous
    method: str
    params: dict = field(default_factory=dict)


def score_msp(softmax):
    """Complement of the maximum softmax probability."""
    return AnomalyMap(1.0 - softmax.max(axis=-1), "msp")


def score_entropy(softmax, normalized=True):
    """Softmax entropy, optionally normalized by log(classes)."""
    h = -(softmax * np.log(np.maximum(softmax, LOG_CLAMP))).sum(axis=-1)
    if normalized:
        h = h / np.log(softmax.shape[-1])
    return AnomalyMap(h, "entropy", {"normalized": normalized})


def score_margin(softmax):
    """1 - top probability + runner-up probability."""
    if softmax.shape[-1] < 2:
        raise ValueError("margin needs at least two classes")
    part = np.partition(softmax, -2, axis=-1)
    return AnomalyMap(1.0 - part[..., -1] + part[..., -2], "margin")


def score_odin(params, image, t=1.0, eps=0.0):
    """MSP sharpened by temperature scaling and an input perturbation.

    The perturbation direction is the sign of the gradient of the summed
    log max softmax (at temperature t) with respect to the input; the
    perturbed image is re-scored at the same temperature.
    """
    if t <= 0:
        raise ValueError("temperature must be positive")
    if eps < 0:
        raise ValueError("perturbation magnitude must be nonnegative")
    x = image
    if eps > 0.0:

        def log_max_softmax(logits):
            p = softmax_map(logits / t)
            m = np.argmax(logits, axis=-1)[..., None]
            value = float(
                np.log(np.maximum(np.take_along_axis(p, m, -1), LOG_CLAMP)).sum()
            )
            one = np.zeros_like(p)
            np.put_along_axis(one, m, 1.0, -1)
            return value, (one - p) / t

        grad = input_gradient(params, x, log_max_softmax)
        x = x - eps * np.sign(-grad)
    logits, _ = forward(params, x)
    p = softmax_map(logits / t)
    return AnomalyMap(1.0 - p.max(axis=-1), "odin", {"t": t, "eps": eps})


def fit_class_gaussians(feature_maps, gt_masks, n_classes):
    """One Gaussian per trained class over pooled ground-truth pixels."""
    pools = [[] for _ in range(n_classes)]
    for feats, mask in zip(feature_maps, gt_masks):
        flat = feats.reshape(-1, feats.shape[-1])
        lab = np.asarray(mask).reshape(-1)
        for s in range(n_classes):
            sel = lab == s
            if sel.any():
                pools[s].append(flat[sel])
    models = []
    for s, chunks in enumerate(pools):
        if not chunks:
            raise ValueError(f"class {s} has no pixels to fit")
        data = np.concatenate(chunks, axis=0)
        if data.shape[0] < 2:
            raise ValueError(f"class {s} has too few pixels to fit")
        models.append(infostat.fit_gaussian(data))
    return models


def _quadform_many(model, flat):
    diff = flat - model.mean
    y = np.linalg.solve(model.chol, diff.T)
    return (y * y).sum(axis=0)


def score_mahalanobis(features, class_gaussians):
    """Minimal squared Mahalanobis distance to any class-conditional Gaussian."""
    if not class_gaussians:
        raise ValueError("no fitted class Gaussians")
    h, w, d = features.shape
    flat = features.reshape(-1, d)
    dists = np.stack([_quadform_many(m, flat) for m in class_gaussians])
    return AnomalyMap(dists.min(axis=0).reshape(h, w), "mahalanobis")


def score_mc_dropout(softmax_samples):
    """Mutual information between prediction and dropout mask (BALD)."""
    if len(softmax_samples) < 2:
        raise ValueError("need at least two dropout samples")
    stack = np.stack(softmax_samples)  # (R, H, W, S)
    mean = stack.mean(axis=0)
    h_mean = -(mean * np.log(np.maximum(mean, LOG_CLAMP))).sum(axis=-1)
    h_each = -(stack * np.log(np.maximum(stack, LOG_CLAMP))).sum(axis=-1)
    return AnomalyMap(h_mean - h_each.mean(axis=0), "mcdropout", {"samples": len(softmax_samples)})


def score_void(softmax_ext, n_trained):
    """Softmax probability of the explicit extra anomaly class."""
    if softmax_ext.shape[-1] != n_trained + 1:
        raise ValueError(
            f"expected {n_trained + 1} channels, got {softmax_ext.shape[-1]}"
        )
    return AnomalyMap(softmax_ext[..., n_trained].copy(), "void")


def fit_pooled_gaussian(feature_maps):
    """Single Gaussian over all training-pixel features."""
    flat = np.concatenate([f.reshape(-1, f.shape[-1]) for f in feature_maps], axis=0)
    return infostat.fit_gaussian(flat)


def score_embedding_density(features, pooled_gaussian, upsample=1):
    """Negative log-likelihood under the pooled feature Gaussian, upsampled.

    Bilinear upsampling is align-corners with output side (n-1)*factor + 1,
    the identity at factor 1.
    """
    h, w, d = features.shape
    flat = features.reshape(-1, d)
    q = _quadform_many(pooled_gaussian, flat)
    nll = (
        0.5 * d * infostat.LOG_2PI + 0.5 * pooled_gaussian.log_det + 0.5 * q
    ).reshape(h, w)
    if upsample != 1:
        nll = bilinear_resize(nll, (h - 1) * upsample + 1, (w - 1) * upsample + 1)
    return AnomalyMap(nll, "density", {"upsample": upsample})
