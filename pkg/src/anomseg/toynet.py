"""Tiny per-pixel classifier: one hidden ReLU layer over k x k patches.

Every pixel is classified from its zero-padded k x k neighborhood, so the
network is a two-layer MLP applied convolutionally.  The hidden layer is
the "encoder" (frozen during incremental training) and doubles as the
feature embedding used by distance- and density-based anomaly scores.

All arithmetic is float64; losses return exact analytic parameter
gradients (checked against finite differences in the tests).  Dropout,
weight init and data shuffling draw from splitmix64 so training runs are
bit-reproducible.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import patch_matrix, patch_scatter
from .rng import SplitMix64, derive_seed
from .tensorio import IGNORE_LABEL, read_tensor, write_tensor

LOG_CLAMP = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NetParams:
    w1: np.ndarray  # (hidden, k*k*3)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (n_out, hidden)
    b2: np.ndarray  # (n_out,)
    k: int = 5

    @property
    def hidden(self):
        return self.w1.shape[0]

    @property
    def n_out(self):
        return self.w2.shape[0]

    def copy(self):
        return NetParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.k
        )


def init_params(k=5, hidden=32, n_classes=4, seed=0):
    """He-style scaled Gaussian init from a splitmix64 stream."""
    rng = SplitMix64(derive_seed(seed, "init"))
    d = k * k * 3
    w1 = rng.normals(hidden * d).reshape(hidden, d) * math.sqrt(2.0 / d)
    w2 = rng.normals(n_classes * hidden).reshape(n_classes, hidden) * math.sqrt(
        2.0 / hidden
    )
    return NetParams(w1, np.zeros(hidden), w2, np.zeros(n_classes), k)


def _dropout_mask(shape, rate, seed):
    rng = SplitMix64(derive_seed(seed, "dropout"))
    u = rng.uniforms(shape[0] * shape[1]).reshape(shape)
    return (u >= rate).astype(np.float64) / (1.0 - rate)


def _forward_flat(params, image, dropout_rate=0.0, dropout_seed=0):
    h, w, _ = image.shape
    patches = patch_matrix(np.asarray(image, dtype=np.float64), params.k)
    acts = np.maximum(patches @ params.w1.T + params.b1, 0.0)
    used = acts
    mask = None
    if dropout_rate > 0.0:
        mask = _dropout_mask(acts.shape, dropout_rate, dropout_seed)
        used = acts * mask
    logits = used @ params.w2.T + params.b2
    return patches, acts, used, mask, logits


def forward(params, image, dropout_rate=0.0, dropout_seed=0):
    """Per-pixel logits and rectified hidden features for one image."""
    h, w, c = image.shape
    if c != 3:
        raise ValueError(f"expected 3-channel image, got {c}")
    _, _, used, _, logits = _forward_flat(params, image, dropout_rate, dropout_seed)
    return (
        logits.reshape(h, w, params.n_out),
        used.reshape(h, w, params.hidden),
    )


def softmax_map(logits):
    """Numerically stable softmax over the last axis."""
    y = np.asarray(logits, dtype=np.float64)
    shifted = y - y.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_mask(logits):
    """Argmax class per pixel; ties go to the smallest class index."""
    return np.argmax(logits, axis=-1).astype(np.uint8)


def _clamped_log(p):
    return np.log(np.maximum(p, LOG_CLAMP))


# ---------------------------------------------------------------------------
# loss values and logit-level gradients
# ---------------------------------------------------------------------------


def ce_value_grad(logits, labels):
    """Mean cross-entropy over non-ignore pixels; returns (value, dlogits)."""
    n_out = logits.shape[-1]
    flat = logits.reshape(-1, n_out)
    lab = np.asarray(labels).reshape(-1)
    counted = lab != IGNORE_LABEL
    n = int(counted.sum())
    if n == 0:
        raise ValueError("empty loss: all pixels ignored")
    p = softmax_map(flat[counted])
    idx = lab[counted].astype(np.int64)
    value = float(-_clamped_log(p[np.arange(n), idx]).mean())
    dflat = np.zeros_like(flat)
    dp = p.copy()
    dp[np.arange(n), idx] -= 1.0
    dflat[counted] = dp / n
    return value, dflat.reshape(logits.shape)


def anom_value_grad(logits):
    """Uniformity loss: mean over all pixels of -(1/S) sum_s log softmax_s."""
    n_out = logits.shape[-1]
    flat = logits.reshape(-1, n_out)
    n = flat.shape[0]
    p = softmax_map(flat)
    value = float(-_clamped_log(p).sum(axis=1).mean() / n_out)
    dflat = (p - 1.0 / n_out) / n
    return value, dflat.reshape(logits.shape)


def distill_value_grad(new_logits, old_logits):
    """Cross-entropy of old softmax against new softmax on the old channels.

    The new softmax runs over all channels (one more than old); the sum is
    over the old channels only, so probability mass leaking to the new
    class is penalized on old-class pixels.
    """
    s_old = old_logits.shape[-1]
    s_new = new_logits.shape[-1]
    if s_new != s_old + 1:
        raise ValueError(f"channel mismatch: new {s_new} vs old {s_old} (+1 required)")
    new_flat = new_logits.reshape(-1, s_new)
    old_flat = old_logits.reshape(-1, s_old)
    n = new_flat.shape[0]
    p_new = softmax_map(new_flat)
    q_old = softmax_map(old_flat)
    value = float(-(q_old * _clamped_log(p_new[:, :s_old])).sum() / n)
    dflat = p_new.copy()
    dflat[:, :s_old] -= q_old
    dflat /= n
    return value, dflat.reshape(new_logits.shape)


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------


def _zero_grads(params):
    return {
        "w1": np.zeros_like(params.w1),
        "b1": np.zeros_like(params.b1),
        "w2": np.zeros_like(params.w2),
        "b2": np.zeros_like(params.b2),
    }


def _backward(params, patches, acts, used, mask, dlogits, want_input=False):
    grads = {
        "w2": dlogits.T @ used,
        "b2": dlogits.sum(axis=0),
    }
    dused = dlogits @ params.w2
    dacts = dused * mask if mask is not None else dused
    dz1 = dacts * (acts > 0.0)
    grads["w1"] = dz1.T @ patches
    grads["b1"] = dz1.sum(axis=0)
    if not want_input:
        return grads, None
    dpatches = dz1 @ params.w1
    return grads, dpatches


def loss_ce(params, image, labels):
    """Cross-entropy with parameter gradients for one image."""
    h, w, _ = image.shape
    patches, acts, used, mask, logits = _forward_flat(params, image)
    value, dlogits = ce_value_grad(logits.reshape(h, w, -1), labels)
    grads, _ = _backward(params, patches, acts, used, mask, dlogits.reshape(h * w, -1))
    return value, grads


def loss_anom(params, image):
    """Entropy-maximization loss with parameter gradients for one image."""
    h, w, _ = image.shape
    patches, acts, used, mask, logits = _forward_flat(params, image)
    value, dlogits = anom_value_grad(logits.reshape(h, w, -1))
    grads, _ = _backward(params, patches, acts, used, mask, dlogits.reshape(h * w, -1))
    return value, grads


def loss_distill(params_new, params_old, image):
    """Distillation of the old model's soft output, with gradients for the new."""
    h, w, _ = image.shape
    patches, acts, used, mask, new_logits = _forward_flat(params_new, image)
    _, _, _, _, old_logits = _forward_flat(params_old, image)
    value, dlogits = distill_value_grad(
        new_logits.reshape(h, w, -1), old_logits.reshape(h, w, -1)
    )
    grads, _ = _backward(
        params_new, patches, acts, used, mask, dlogits.reshape(h * w, -1)
    )
    return value, grads


def _mean_grads(grad_list):
    out = grad_list[0]
    for g in grad_list[1:]:
        for key in out:
            out[key] += g[key]
    for key in out:
        out[key] /= len(grad_list)
    return out


def loss_total_entmax(params, batch_d, batch_danom, lam):
    """(1-lam) * mean CE over labeled batch + lam * mean uniformity loss."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam outside [0, 1]")
    value = 0.0
    grads = _zero_grads(params)
    if lam < 1.0:
        if not batch_d:
            raise ValueError("empty labeled batch")
        ce_vals, ce_grads = zip(*(loss_ce(params, img, lab) for img, lab in batch_d))
        value += (1.0 - lam) * float(np.mean(ce_vals))
        ce = _mean_grads(list(ce_grads))
        for key in grads:
            grads[key] += (1.0 - lam) * ce[key]
    if lam > 0.0:
        if not batch_danom:
            raise ValueError("empty proxy batch")
        an_vals, an_grads = zip(*(loss_anom(params, img) for img in batch_danom))
        value += lam * float(np.mean(an_vals))
        an = _mean_grads(list(an_grads))
        for key in grads:
            grads[key] += lam * an[key]
    return value, grads


def input_gradient(params, image, scalar_fn):
    """Exact gradient of scalar_fn(logits) with respect to the input image.

    scalar_fn maps the (H, W, n_out) logit map to (value, dlogits).
    """
    h, w, _ = image.shape
    patches, acts, used, mask, logits = _forward_flat(params, image)
    _, dlogits = scalar_fn(logits.reshape(h, w, -1))
    _, dpatches = _backward(
        params, patches, acts, used, mask, dlogits.reshape(h * w, -1), want_input=True
    )
    return patch_scatter(dpatches, h, w, 3, params.k)


# ---------------------------------------------------------------------------
# training objectives and the SGD loop
# ---------------------------------------------------------------------------


class CrossEntropyObjective:
    """Plain supervised training; samples are (image, labels) pairs."""

    def step(self, params, batch, rng):
        vals, grads = zip(*(loss_ce(params, img, lab) for img, lab in batch))
        return float(np.mean(vals)), _mean_grads(list(grads))


class EntropyMaxObjective:
    """Multi-criteria objective: CE on labeled data, uniformity on proxies.

    Proxy images are drawn from the pool per step using the training rng,
    so runs stay deterministic.
    """

    def __init__(self, proxy_images, lam=0.5):
        if not proxy_images:
            raise ValueError("empty proxy pool")
        self.proxy_images = proxy_images
        self.lam = lam

    def step(self, params, batch, rng):
        picks = [
            self.proxy_images[rng.randint(len(self.proxy_images))]
            for _ in range(len(batch))
        ]
        return loss_total_entmax(params, batch, picks, self.lam)


class DistillObjective:
    """Incremental objective: CE on (pseudo) labels + distillation to the old net."""

    def __init__(self, old_params, lam=0.5):
        self.old_params = old_params
        self.lam = lam

    def step(self, params, batch, rng):
        total = 0.0
        acc = None
        for img, lab in batch:
            ce_v, ce_g = loss_ce(params, img, lab)
            d_v, d_g = loss_distill(params, self.old_params, img)
            total += (1.0 - self.lam) * ce_v + self.lam * d_v
            for key in ce_g:
                ce_g[key] = (1.0 - self.lam) * ce_g[key] + self.lam * d_g[key]
            acc = ce_g if acc is None else {k: acc[k] + ce_g[k] for k in acc}
        n = len(batch)
        return total / n, {k: v / n for k, v in acc.items()}


def train(
    params,
    data,
    objective,
    epochs,
    lr,
    momentum=0.9,
    seed=0,
    freeze_encoder=False,
    batch_size=8,
):
    """Mini-batch SGD with momentum; returns (new params, per-epoch loss trace)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    params = params.copy()
    rng = SplitMix64(derive_seed(seed, "sgd"))
    velocity = _zero_grads(params)
    trace = []
    for epoch in range(epochs):
        order = list(range(len(data)))
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = [data[i] for i in order[start : start + batch_size]]
            loss, grads = objective.step(params, batch, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, batch {start // batch_size}"
                )
            if freeze_encoder:
                grads["w1"][:] = 0.0
                grads["b1"][:] = 0.0
            for key, vel in velocity.items():
                vel *= momentum
                vel -= lr * grads[key]
            params.w1 += velocity["w1"]
            params.b1 += velocity["b1"]
            params.w2 += velocity["w2"]
            params.b2 += velocity["b2"]
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return params, trace


def extend_head(params, init_seed=0):
    """Add one output row to the head; everything else is copied exactly."""
    rng = SplitMix64(init_seed)
    draws = rng.normals(params.hidden + 1) * 0.01
    w2 = np.vstack([params.w2, draws[: params.hidden]])
    b2 = np.append(params.b2, draws[params.hidden])
    return NetParams(params.w1.copy(), params.b1.copy(), w2, b2, params.k)


def dropout_softmax_samples(params, image, rate=0.25, n_samples=8, seed=0):
    """MC-dropout softmax maps with per-sample derived seeds."""
    out = []
    for r in range(n_samples):
        logits, _ = forward(
            params, image, dropout_rate=rate, dropout_seed=derive_seed(seed, "mc", r)
        )
        out.append(softmax_map(logits))
    return out


# ---------------------------------------------------------------------------
# parameter persistence (tensor container per field + JSON header)
# ---------------------------------------------------------------------------


def save_params(directory, params):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("w1", "b1", "w2", "b2"):
        write_tensor(directory / f"{name}.ten", getattr(params, name))
    header = {"k": params.k, "hidden": params.hidden, "n_out": params.n_out}
    (directory / "params.json").write_text(json.dumps(header, sort_keys=True) + "\n")


def load_params(directory):
    directory = Path(directory)
    header = json.loads((directory / "params.json").read_text())
    fields = {
        name: read_tensor(directory / f"{name}.ten").astype(np.float64)
        for name in ("w1", "b1", "w2", "b2")
    }
    params = NetParams(fields["w1"], fields["b1"], fields["w2"], fields["b2"], header["k"])
    if params.hidden != header["hidden"] or params.n_out != header["n_out"]:
        raise ValueError("parameter header inconsistent with tensors")
    return params
