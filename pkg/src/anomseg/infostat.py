"""Information-based anomaly statistics on vector data.

Information here is the negative log density in nats.  Gaussian models are
fitted with the arithmetic mean and the (n-1)-normalized empirical
covariance; a ridge of 1e-6 on the diagonal rescues singular fits.
Relative information subtracts a reference ("anomaly") model's
information, which makes the quantity invariant under invertible
reparameterizations of the data.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.linalg import LinAlgError

from .rng import SplitMix64, derive_seed

RIDGE = 1e-6
CLAMP = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianModel:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    log_det: float

    @property
    def dim(self):
        return self.mean.shape[0]


def make_gaussian(mean, cov):
    """Validate and cache the Cholesky factor of a Gaussian model."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if not np.allclose(cov, cov.T, atol=1e-9):
        raise ValueError("covariance not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except LinAlgError:
        raise ValueError("covariance not positive definite") from None
    log_det = 2.0 * float(np.log(np.diag(chol)).sum())
    return GaussianModel(mean, cov, chol, log_det)


def fit_gaussian(samples):
    """Mean + empirical covariance; ridge-regularized when singular."""
    z = np.asarray(samples, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("samples must be 2-D (n, d)")
    n, d = z.shape
    if n < 2:
        raise ValueError("need at least two samples")
    mean = z.mean(axis=0)
    centered = z - mean
    cov = (centered.T @ centered) / (n - 1)
    cov = 0.5 * (cov + cov.T)
    try:
        return make_gaussian(mean, cov)
    except ValueError:
        cov = cov + RIDGE * np.eye(d)
        return make_gaussian(mean, cov)


def mahalanobis_sq(model, z):
    """Squared Mahalanobis distance(s) of z under the model."""
    z = np.asarray(z, dtype=np.float64)
    diff = np.atleast_2d(z) - model.mean
    y = np.linalg.solve(model.chol, diff.T)
    q = (y * y).sum(axis=0)
    return float(q[0]) if z.ndim == 1 else q


def gaussian_information(model, z):
    """Negative log density of z, in nats."""
    q = mahalanobis_sq(model, z)
    return 0.5 * model.dim * LOG_2PI + 0.5 * model.log_det + 0.5 * q


def relative_information(p_model, anom_model, z):
    """Negative log density ratio against the anomaly reference model."""
    return gaussian_information(p_model, z) - gaussian_information(anom_model, z)


@dataclass
class BinaryOddsClassifier:
    weights: np.ndarray
    bias: float
    prior_anom: float

    def __post_init__(self):
        if not 0.0 < self.prior_anom < 1.0:
            raise ValueError("prior must be strictly inside (0, 1)")

    def prob_anom(self, z):
        a = float(np.dot(self.weights, np.asarray(z, dtype=np.float64)) + self.bias)
        p = 1.0 / (1.0 + math.exp(-a)) if a > -700 else 0.0
        return min(max(p, CLAMP), 1.0 - CLAMP)


def classifier_relative_information(clf, z):
    """Relative information estimated from a binary classifier and a prior."""
    p = clf.prob_anom(z)
    c = -math.log(clf.prior_anom / (1.0 - clf.prior_anom))
    return -math.log((1.0 - p) / p) + c


def outlier_test(train_informations, info_z, alpha, bootstrap=1000, seed=0):
    """Extremal-statistic outlier check via bootstrap resampling.

    Resamples the training informations with replacement and flags an
    outlier when the fraction of bootstrap maxima exceeding info_z is at
    most alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha outside (0, 1)")
    train = np.asarray(train_informations, dtype=np.float64)
    n = train.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = SplitMix64(derive_seed(seed, "bootstrap"))
    idx = (rng.uniforms(bootstrap * n) * n).astype(np.int64).reshape(bootstrap, n)
    maxima = train[idx].max(axis=1)
    frac = float((maxima > info_z).mean())
    return frac <= alpha


def novelty_test(train_informations, info_z, alpha):
    """Novel iff info_z reaches the empirical (1-alpha) tail of the training set."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha outside (0, 1)")
    train = np.asarray(train_informations, dtype=np.float64)
    if train.shape[0] == 0:
        raise ValueError("empty training set")
    frac = float((train > info_z).mean())
    return frac <= alpha


def entropy(probs):
    """Shannon entropy in nats, logs clamped at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    return float(-(p * np.log(np.maximum(p, CLAMP))).sum())


def expected_information(cond_probs, i_rel_x, relative, n_classes):
    """Expected (relative) information of a labeled instance.

    entropy(cond_probs) + i_rel_x + b, where b is -log(n_classes) for the
    relative variant (non-informative anomaly conditional) and 0 otherwise.
    """
    p = np.asarray(cond_probs, dtype=np.float64)
    if p.shape[0] != n_classes:
        raise ValueError("class count mismatch")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("conditional probabilities not normalized")
    b = -math.log(n_classes) if relative else 0.0
    return entropy(p) + float(i_rel_x) + b
