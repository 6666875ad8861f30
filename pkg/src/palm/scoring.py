"""Test-time OOD scores and embedding-quality diagnostics.

All scores follow one orientation: larger means more ID-like. The
Mahalanobis score works on penultimate features with class-conditional
means and a single pooled covariance; the KNN score on unit embeddings,
where Euclidean and cosine orderings coincide; the posterior score is
the maximum class posterior under uniform prototype weights (test time
has no labeled batch to run the balanced assignment on).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InsufficientData, InvalidInput, SingularCovariance
from .losses import class_posterior


@dataclass
class GaussianFit:
    """Per-class means with a shared, shrinkage-regularized covariance."""

    means: np.ndarray        # (C, E)
    covariance: np.ndarray   # (E, E), pre-regularization
    shrinkage: float

    @property
    def regularized(self) -> np.ndarray:
        e = self.covariance.shape[0]
        return self.covariance + self.shrinkage * np.eye(e)


@dataclass
class ScoreSeries:
    """A list of scores with a fixed larger-is-more-ID orientation."""

    values: np.ndarray
    source: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InvalidInput("scores must form a 1-D series")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInput("scores must be finite")


def fit_gaussian(features: np.ndarray, labels: np.ndarray,
                 shrinkage: float | None = None) -> GaussianFit:
    """Class means plus pooled covariance (centered scatter over N).

    ``shrinkage=None`` uses 1e-6 * trace(cov) / E, which keeps the fit
    invertible when the feature dimension rivals the sample count.

    Raises:
        InsufficientData: any class has fewer than 2 samples.
        SingularCovariance: the regularized covariance is not PD.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise InvalidInput("features must be (N, E) aligned with labels")
    classes = np.unique(labels)
    e = features.shape[1]

    means = np.zeros((len(classes), e))
    centered = np.empty_like(features)
    for row, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise InsufficientData(f"class {c} has {idx.size} sample(s), need >= 2")
        means[row] = features[idx].mean(axis=0)
        centered[idx] = features[idx] - means[row]
    cov = centered.T @ centered / features.shape[0]

    if shrinkage is None:
        shrinkage = 1e-6 * float(np.trace(cov)) / e
    elif shrinkage < 0:
        raise InvalidInput("shrinkage must be >= 0")

    fit = GaussianFit(means=means, covariance=cov, shrinkage=float(shrinkage))
    try:
        cho_factor(fit.regularized)
    except np.linalg.LinAlgError as err:
        raise SingularCovariance("regularized covariance is not positive definite") from err
    return fit


def mahalanobis_score(fit: GaussianFit, h: np.ndarray):
    """-min_c (h - mu_c)^T (Sigma + delta I)^{-1} (h - mu_c).

    Accepts a single feature vector or an (N, E) batch.
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    pts = h[None, :] if single else h
    try:
        factor = cho_factor(fit.regularized)
    except np.linalg.LinAlgError as err:
        raise SingularCovariance("covariance is singular") from err

    dists = np.empty((pts.shape[0], fit.means.shape[0]))
    for c in range(fit.means.shape[0]):
        diff = pts - fit.means[c]
        dists[:, c] = np.sum(diff * cho_solve(factor, diff.T).T, axis=1)
    scores = -dists.min(axis=1)
    return float(scores[0]) if single else scores


def knn_score(train_embeddings: np.ndarray, z: np.ndarray, k: int):
    """Negative Euclidean distance to the k-th nearest training embedding."""
    train_embeddings = np.asarray(train_embeddings, dtype=np.float64)
    n = train_embeddings.shape[0]
    if not 1 <= k <= n:
        raise InvalidInput(f"k must lie in [1, {n}], got {k}")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    pts = z[None, :] if single else z
    d2 = (np.sum(pts**2, axis=1, keepdims=True)
          + np.sum(train_embeddings**2, axis=1)[None, :]
          - 2.0 * pts @ train_embeddings.T)
    d = np.sqrt(np.maximum(d2, 0.0))
    kth = np.sort(d, axis=1)[:, k - 1]
    scores = -kth
    return float(scores[0]) if single else scores


def posterior_score(z: np.ndarray, bank, tau: float):
    """Maximum class posterior with uniform per-class weights."""
    z = np.asarray(z, dtype=np.float64)
    uniform = np.full(bank.prototypes.shape[:2],
                      1.0 / bank.prototypes.shape[1])
    if z.ndim == 1:
        return float(class_posterior(z, bank, uniform, tau).max())
    return np.array([class_posterior(row, bank, uniform, tau).max()
                     for row in z])


def _max_proto_cosine(embeddings: np.ndarray, bank) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] == 0:
        raise InvalidInput("need at least one embedding")
    flat = bank.prototypes.reshape(-1, bank.prototypes.shape[2])
    return (embeddings @ flat.T).max(axis=1)


def compactness(embeddings: np.ndarray, bank) -> float:
    """Mean angle (degrees) between each embedding and its nearest prototype."""
    cos = np.clip(_max_proto_cosine(embeddings, bank), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def far_id_fraction(embeddings: np.ndarray, bank, threshold: float = 0.8) -> float:
    """Fraction of samples whose best prototype similarity is below threshold."""
    return float(np.mean(_max_proto_cosine(embeddings, bank) < threshold))
