"""Hyperspherical primitives.

Unit vectors are plain float64 ``numpy`` arrays with Euclidean norm 1;
there is no wrapper class. This module provides the projection onto the
sphere together with its exact Jacobian (needed for reverse-mode
differentiation through the projection), a von Mises-Fisher sampler, and
a synthetic dataset generator that draws each in-distribution class from
a multi-modal vMF mixture and out-of-distribution samples from held-out
directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVector, InvalidInput, SpecInfeasible

NORM_FLOOR = 1e-12

# Rejection cap when placing pairwise-separated directions.
_MAX_DIRECTION_REJECTS = 10_000


def normalize(x: np.ndarray) -> np.ndarray:
    """Project ``x`` onto the unit sphere, ``x / ||x||``.

    Raises:
        DegenerateVector: if ``||x|| <= 1e-12``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = float(np.linalg.norm(x))
    if not np.isfinite(n) or n <= NORM_FLOOR:
        raise DegenerateVector(f"cannot normalize vector with norm {n!r}")
    return x / n


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise :func:`normalize` for a 2-D batch."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1)
    if not np.all(np.isfinite(n)) or np.any(n <= NORM_FLOOR):
        bad = int(np.argmin(np.where(np.isfinite(n), n, -np.inf)))
        raise DegenerateVector(f"row {bad} has norm {n[bad]!r}")
    return x / n[:, None]


def normalize_jacobian(x: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`normalize` at ``x``: ``(I - u u^T) / ||x||``.

    ``u = x / ||x||``. The result is symmetric and annihilates ``x``
    (the projection is scale-invariant along the ray through ``x``).
    """
    x = np.asarray(x, dtype=np.float64)
    n = float(np.linalg.norm(x))
    if not np.isfinite(n) or n <= NORM_FLOOR:
        raise DegenerateVector(f"cannot differentiate normalize at norm {n!r}")
    u = x / n
    return (np.eye(x.shape[0]) - np.outer(u, u)) / n


@dataclass(frozen=True)
class VmfParams:
    """von Mises-Fisher parameters: mean direction and concentration.

    ``kappa = 0`` is the uniform distribution on the sphere.
    """

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 1 or mu.shape[0] < 2:
            raise InvalidInput("mu must be a vector of dimension >= 2")
        if abs(float(np.linalg.norm(mu)) - 1.0) > 1e-9:
            raise InvalidInput("mu must be unit-norm")
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise InvalidInput("kappa must be finite and >= 0")
        object.__setattr__(self, "mu", mu)


def _sample_uniform_sphere(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return normalize_rows(v)


def _sample_radial(kappa: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample the cosine w = mu^T z of a vMF draw (Wood's scheme)."""
    d = dim - 1
    b = d / (np.sqrt(4.0 * kappa**2 + d**2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d * np.log(1.0 - x0**2)

    out = np.empty(n)
    filled = 0
    while filled < n:
        m = n - filled
        z = rng.beta(d / 2.0, d / 2.0, size=m)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=m)
        ok = kappa * w + d * np.log(1.0 - x0 * w) - c >= np.log(u)
        k = int(ok.sum())
        out[filled:filled + k] = w[ok]
        filled += k
    return out


def sample_vmf(params: VmfParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. unit vectors from vMF(mu, kappa).

    Returns an ``(n, D)`` array. ``kappa = 0`` falls back to the uniform
    distribution; otherwise the radial component is rejection-sampled and
    combined with a uniformly random tangent direction.
    """
    if n < 1:
        raise InvalidInput("n must be >= 1")
    mu, kappa = params.mu, float(params.kappa)
    dim = mu.shape[0]
    if kappa == 0.0:
        return _sample_uniform_sphere(dim, n, rng)

    w = _sample_radial(kappa, dim, n, rng)

    # Tangent direction: Gaussian draw projected orthogonal to mu.
    v = rng.standard_normal((n, dim))
    v -= np.outer(v @ mu, mu)
    v = normalize_rows(v)

    samples = v * np.sqrt(np.maximum(1.0 - w**2, 0.0))[:, None] + w[:, None] * mu
    return normalize_rows(samples)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic hyperspherical ID/OOD dataset.

    Each of ``classes`` ID classes is an equal-weight mixture of
    ``modes_per_class`` vMF components with concentration ``kappa_id``.
    OOD test samples come from ``ood_directions`` held-out vMF components.
    All mode and OOD directions are pairwise separated by at least
    ``min_angular_sep`` radians.
    """

    dim: int = 16
    classes: int = 4
    modes_per_class: int = 2
    kappa_id: float = 50.0
    ood_directions: int = 4
    min_angular_sep: float = 1.0
    train_per_class: int = 200
    test_per_class: int = 100
    ood_samples: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise InvalidInput("dim must be >= 2")
        if min(self.classes, self.modes_per_class, self.ood_directions) < 1:
            raise InvalidInput("classes, modes_per_class, ood_directions must be >= 1")
        if min(self.train_per_class, self.test_per_class, self.ood_samples) < 1:
            raise InvalidInput("sample counts must be >= 1")
        if not (0.0 < self.min_angular_sep < np.pi):
            raise InvalidInput("min_angular_sep must lie in (0, pi)")
        if self.kappa_id < 0:
            raise InvalidInput("kappa_id must be >= 0")


@dataclass
class EmbeddingBatch:
    """Points on the sphere with optional labels and derived features.

    ``x`` holds the raw on-sphere points ((N, D) float64). ``labels`` is
    ``None`` for unlabeled data. ``h`` (penultimate features) and ``z``
    (projected unit embeddings) are filled in by an encoder pass.
    """

    x: np.ndarray
    labels: np.ndarray | None = None
    h: np.ndarray | None = None
    z: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


def _place_directions(n: int, dim: int, min_sep: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Place n directions pairwise >= min_sep radians apart, by rejection."""
    cos_cap = np.cos(min_sep)
    dirs: list[np.ndarray] = []
    rejects = 0
    while len(dirs) < n:
        cand = _sample_uniform_sphere(dim, 1, rng)[0]
        if all(float(cand @ d) < cos_cap for d in dirs):
            dirs.append(cand)
        else:
            rejects += 1
            if rejects > _MAX_DIRECTION_REJECTS:
                raise SpecInfeasible(
                    f"could not place {n} directions with separation "
                    f">= {min_sep} rad in dimension {dim}")
    return np.stack(dirs)


def gen_synthetic(spec: SyntheticSpec) -> dict[str, EmbeddingBatch]:
    """Generate ``{"id_train", "id_test", "ood_test"}`` batches.

    Deterministic given ``spec.seed``. Labels are integers in
    ``[0, classes)``; the OOD batch is unlabeled.
    """
    rng = np.random.default_rng(spec.seed)
    n_dirs = spec.classes * spec.modes_per_class + spec.ood_directions
    dirs = _place_directions(n_dirs, spec.dim, spec.min_angular_sep, rng)
    mode_dirs = dirs[: spec.classes * spec.modes_per_class].reshape(
        spec.classes, spec.modes_per_class, spec.dim)
    ood_dirs = dirs[spec.classes * spec.modes_per_class:]

    def draw_class(c: int, count: int) -> np.ndarray:
        picks = rng.integers(0, spec.modes_per_class, size=count)
        pts = np.empty((count, spec.dim))
        for m in range(spec.modes_per_class):
            idx = np.flatnonzero(picks == m)
            if idx.size:
                params = VmfParams(mode_dirs[c, m], spec.kappa_id)
                pts[idx] = sample_vmf(params, idx.size, rng)
        return pts

    def draw_split(per_class: int) -> EmbeddingBatch:
        xs = [draw_class(c, per_class) for c in range(spec.classes)]
        ys = np.repeat(np.arange(spec.classes), per_class)
        return EmbeddingBatch(x=np.concatenate(xs), labels=ys.astype(np.int64))

    id_train = draw_split(spec.train_per_class)
    id_test = draw_split(spec.test_per_class)

    picks = rng.integers(0, spec.ood_directions, size=spec.ood_samples)
    ood_pts = np.empty((spec.ood_samples, spec.dim))
    for m in range(spec.ood_directions):
        idx = np.flatnonzero(picks == m)
        if idx.size:
            params = VmfParams(ood_dirs[m], spec.kappa_id)
            ood_pts[idx] = sample_vmf(params, idx.size, rng)
    ood_test = EmbeddingBatch(x=ood_pts, labels=None)

    return {"id_train": id_train, "id_test": id_test, "ood_test": ood_test}
