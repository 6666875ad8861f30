"""Soft sample-to-prototype assignment.

Per class, the assignment matrix ``W`` (K prototypes x B_c samples) is
the entropy-regularized optimal-transport plan between the prototype set
and the class's batch embeddings:

    W = diag(u) * exp(P^T Z / eps) * diag(v)

with ``u, v`` obtained by Sinkhorn-Knopp sweeps that renormalize row
sums to 1/K and column sums to 1/B_c (balanced assignment over the
transportation polytope). A top-k shrinkage then zeroes, per sample,
every weight not among its ``k_top`` largest. Assignment weights are
constants with respect to gradients: nothing in this module participates
in backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyClass, InvalidInput, NumericalError

# Below this epsilon the direct exponential form can overflow; switch to
# log-domain sweeps.
LOG_DOMAIN_EPSILON = 0.01

_CONVERGE_TOL = 1e-9
# Ill-conditioned kernels (sharp similarities, small batches) converge at
# rates like 1 - 4e-5 per sweep; the cap must accommodate them.
_MAX_SWEEPS = 1_000_000


def _check_now(it: int) -> bool:
    return it <= 100 or it % 100 == 0


@dataclass
class AssignmentMatrix:
    """Per-class assignment weights, K x B_c.

    ``residual`` is the worst absolute deviation of the row/column sums
    from their 1/K and 1/B_c targets at return time; ``converged`` means
    it is below 1e-6.
    """

    weights: np.ndarray
    class_id: int
    converged: bool
    iterations_used: int
    residual: float


def _marginal_residual(w: np.ndarray) -> float:
    k, b = w.shape
    row = np.abs(w.sum(axis=1) - 1.0 / k).max()
    col = np.abs(w.sum(axis=0) - 1.0 / b).max()
    return float(max(row, col))


def _sinkhorn_direct(scaled: np.ndarray, iterations: int) -> tuple[np.ndarray, int]:
    k, b = scaled.shape
    h = np.exp(scaled)
    v = np.ones(b)
    u = np.ones(k)

    def plan():
        return u[:, None] * h * v[None, :]

    if iterations > 0:
        for _ in range(iterations):
            u = 1.0 / (k * (h @ v))
            v = 1.0 / (b * (h.T @ u))
        return plan(), iterations

    for it in range(1, _MAX_SWEEPS + 1):
        u = 1.0 / (k * (h @ v))
        v = 1.0 / (b * (h.T @ u))
        if _check_now(it) and _marginal_residual(plan()) < _CONVERGE_TOL:
            return plan(), it
    return plan(), _MAX_SWEEPS


def _sinkhorn_log(scaled: np.ndarray, iterations: int) -> tuple[np.ndarray, int]:
    k, b = scaled.shape
    log_u = np.zeros(k)
    log_v = np.zeros(b)

    def plan():
        return np.exp(log_u[:, None] + scaled + log_v[None, :])

    def sweep(log_u, log_v):
        log_u = -np.log(k) - logsumexp(scaled + log_v[None, :], axis=1)
        log_v = -np.log(b) - logsumexp(scaled + log_u[:, None], axis=0)
        return log_u, log_v

    if iterations > 0:
        for _ in range(iterations):
            log_u, log_v = sweep(log_u, log_v)
        return plan(), iterations

    for it in range(1, _MAX_SWEEPS + 1):
        log_u, log_v = sweep(log_u, log_v)
        if _check_now(it) and _marginal_residual(plan()) < _CONVERGE_TOL:
            return plan(), it
    return plan(), _MAX_SWEEPS


def sinkhorn_assign(prototypes: np.ndarray, embeddings: np.ndarray,
                    epsilon: float, iterations: int,
                    class_id: int = 0) -> AssignmentMatrix:
    """Balanced soft assignment of ``embeddings`` to ``prototypes``.

    Args:
        prototypes: (K, D) unit vectors.
        embeddings: (B, D) unit vectors.
        epsilon: entropic regularization weight, > 0.
        iterations: fixed number of Sinkhorn sweeps; 0 means iterate to a
            marginal residual below 1e-9 (capped at 10^6 sweeps).

    Raises:
        EmptyClass: if ``embeddings`` is empty.
        NumericalError: if the similarity matrix is non-finite.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] == 0:
        raise EmptyClass(f"class {class_id} has no samples in this batch")
    if prototypes.shape[0] < 1:
        raise InvalidInput("need at least one prototype")
    if epsilon <= 0:
        raise InvalidInput("epsilon must be > 0")
    if iterations < 0:
        raise InvalidInput("iterations must be >= 0")

    scaled = (prototypes @ embeddings.T) / epsilon
    if not np.all(np.isfinite(scaled)):
        raise NumericalError("non-finite similarity between prototypes and embeddings")

    if epsilon < LOG_DOMAIN_EPSILON:
        w, used = _sinkhorn_log(scaled, iterations)
    else:
        w, used = _sinkhorn_direct(scaled, iterations)

    if not np.all(np.isfinite(w)):
        raise NumericalError("Sinkhorn iteration produced non-finite weights")
    res = _marginal_residual(w)
    return AssignmentMatrix(weights=w, class_id=class_id,
                            converged=res < 1e-6, iterations_used=used,
                            residual=res)


def hard_assign(prototypes: np.ndarray, embeddings: np.ndarray,
                class_id: int = 0) -> AssignmentMatrix:
    """One-hot assignment: each sample to its most similar prototype.

    Ties go to the lower prototype index.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] == 0:
        raise EmptyClass(f"class {class_id} has no samples in this batch")
    sims = prototypes @ embeddings.T
    if not np.all(np.isfinite(sims)):
        raise NumericalError("non-finite similarity between prototypes and embeddings")
    w = np.zeros_like(sims)
    w[np.argmax(sims, axis=0), np.arange(sims.shape[1])] = 1.0
    return AssignmentMatrix(weights=w, class_id=class_id, converged=True,
                            iterations_used=0, residual=_marginal_residual(w))


def prune_topk(matrix: AssignmentMatrix, k_top: int) -> AssignmentMatrix:
    """Zero, per sample, all weights outside that sample's ``k_top`` largest.

    Surviving entries are kept unchanged (no renormalization). Ties at
    the cut are resolved by keeping the lower prototype index.
    """
    k = matrix.weights.shape[0]
    if not 1 <= k_top <= k:
        raise InvalidInput(f"k_top must be in [1, {k}], got {k_top}")
    if k_top == k:
        return matrix
    w = matrix.weights.copy()
    # Stable descending sort: among equal weights, lower indices sort first.
    order = np.argsort(-w, axis=0, kind="stable")
    cols = np.arange(w.shape[1])[None, :]
    keep = np.zeros_like(w, dtype=bool)
    keep[order[:k_top], cols] = True
    w[~keep] = 0.0
    return AssignmentMatrix(weights=w, class_id=matrix.class_id,
                            converged=matrix.converged,
                            iterations_used=matrix.iterations_used,
                            residual=matrix.residual)


@dataclass
class WeightTable:
    """Per-sample, per-class prototype weights, shape (B, C, K).

    Row ``(i, y_i)`` holds sample i's pruned Sinkhorn weights within its
    own class; rows for every other class are uniform 1/K. The table is
    a stop-gradient constant.
    """

    weights: np.ndarray
    stop_gradient: bool = True

    @property
    def batch_size(self) -> int:
        return self.weights.shape[0]

    def own_rows(self, labels: np.ndarray) -> np.ndarray:
        """(B, K) rows for each sample's own class."""
        return self.weights[np.arange(self.weights.shape[0]), labels]


def build_weight_table(batch, bank, epsilon: float, iterations: int,
                       k_top: int, assignment_mode: str = "soft") -> WeightTable:
    """Assemble the full weight table for a labeled batch.

    Groups the batch by class, runs :func:`sinkhorn_assign` (or
    :func:`hard_assign` in hard mode) plus :func:`prune_topk` on each
    nonempty class, and fills every cross-class row with uniform 1/K.

    ``batch`` needs ``z`` (B, D) and ``labels`` (B,); ``bank`` supplies
    ``prototypes`` (C, K, D).
    """
    z = batch.z
    labels = np.asarray(batch.labels)
    prototypes = bank.prototypes
    c_total, k_total = prototypes.shape[0], prototypes.shape[1]
    if labels.min() < 0 or labels.max() >= c_total:
        raise InvalidInput("batch labels outside [0, C)")

    table = np.full((z.shape[0], c_total, k_total), 1.0 / k_total)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if assignment_mode == "hard":
            m = hard_assign(prototypes[c], z[idx], class_id=int(c))
        elif assignment_mode == "soft":
            m = sinkhorn_assign(prototypes[c], z[idx], epsilon, iterations,
                                class_id=int(c))
        else:
            raise InvalidInput(f"unknown assignment_mode {assignment_mode!r}")
        m = prune_topk(m, k_top)
        table[idx, c, :] = m.weights.T
    return WeightTable(weights=table)
