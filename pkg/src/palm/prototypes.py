"""The prototype bank and its EMA update.

Each class keeps K unit-norm prototypes. Once per training iteration the
bank is blended toward the weighted batch mean and renormalized:

    p <- Normalize(alpha * p + (1 - alpha) * sum_i 1(y_i = c) w_ik z_i)

The update happens before the losses are evaluated, so within the
iteration the updated prototypes are differentiable functions of the
batch embeddings: an :class:`EmaPathway` records, per updated prototype,
which samples contributed with what weights and the pre-normalization
blend, which is exactly what is needed to route loss gradients from
prototypes back to embeddings. ``detach`` drops that record at the end
of the iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePrototype, InvalidInput
from .geometry import normalize_rows

_BLEND_FLOOR = 1e-12


@dataclass
class PathwayEntry:
    """Gradient bookkeeping for one updated prototype."""

    class_id: int
    proto_id: int
    sample_indices: np.ndarray   # (m,) batch positions that contributed
    weights: np.ndarray          # (m,) their assignment weights
    blend: np.ndarray            # (D,) alpha*p_old + (1-alpha)*weighted sum
    norm: float                  # ||blend||
    unit: np.ndarray             # blend / norm == the stored prototype


@dataclass
class EmaPathway:
    """All gradient routes opened by one EMA update."""

    batch_size: int
    alpha: float
    entries: list[PathwayEntry] = field(default_factory=list)

    def backprop_to_embeddings(self, grad_prototypes: np.ndarray,
                               dim: int) -> np.ndarray:
        """Map d(loss)/d(prototypes) to d(loss)/d(embeddings).

        Composes the normalization Jacobian at each blend with the
        (1 - alpha) * w_ik coefficient of each contributing sample.
        """
        grad_z = np.zeros((self.batch_size, dim))
        scale = 1.0 - self.alpha
        if scale == 0.0:
            return grad_z
        for e in self.entries:
            g = grad_prototypes[e.class_id, e.proto_id]
            jg = (g - e.unit * float(e.unit @ g)) / e.norm
            grad_z[e.sample_indices] += (scale * e.weights)[:, None] * jg[None, :]
        return grad_z


@dataclass
class PrototypeBank:
    """C x K x D unit-norm prototypes with EMA momentum state.

    ``pathway`` is non-None exactly while the bank is attached (its
    values carry a gradient route to the current batch).
    """

    prototypes: np.ndarray
    alpha: float
    pathway: EmaPathway | None = None

    @property
    def attached(self) -> bool:
        return self.pathway is not None

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]


def init_uniform(num_classes: int, num_prototypes: int, dim: int,
                 rng: np.random.Generator, alpha: float = 0.999) -> PrototypeBank:
    """C*K i.i.d. uniform points on the sphere (normalized Gaussian draws)."""
    if num_classes < 1 or num_prototypes < 1:
        raise InvalidInput("need at least one class and one prototype")
    if dim < 2:
        raise InvalidInput("dim must be >= 2")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInput("alpha must lie in [0, 1]")
    draws = rng.standard_normal((num_classes * num_prototypes, dim))
    pts = normalize_rows(draws).reshape(num_classes, num_prototypes, dim)
    return PrototypeBank(prototypes=pts, alpha=alpha)


def ema_update(bank: PrototypeBank, z: np.ndarray, labels: np.ndarray,
               table) -> tuple[PrototypeBank, EmaPathway]:
    """One EMA step of the bank toward the weighted batch means.

    Prototypes of classes absent from the batch, and prototypes whose
    batch weight mass is exactly zero (everything pruned away), keep
    their values bit-identically. ``alpha == 1`` is also an exact no-op
    on values. The returned bank is attached.

    Raises:
        DegeneratePrototype: a nonzero-mass blend collapsed below 1e-12.
    """
    if bank.attached:
        raise InvalidInput("bank must be detached before an EMA update")
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    if z.shape[0] != labels.shape[0]:
        raise InvalidInput("z and labels disagree on batch size")

    alpha = bank.alpha
    new_protos = bank.prototypes.copy()
    pathway = EmaPathway(batch_size=z.shape[0], alpha=alpha)

    if alpha == 1.0:  # values frozen; no gradient route either
        return PrototypeBank(new_protos, alpha, pathway), pathway

    own = table.own_rows(labels)  # (B, K)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        w_c = own[idx]                       # (B_c, K)
        sums = w_c.T @ z[idx]                # (K, D)
        for k in range(bank.num_prototypes):
            if not np.any(w_c[:, k] != 0.0):
                continue  # no batch mass reached this prototype
            blend = alpha * bank.prototypes[c, k] + (1.0 - alpha) * sums[k]
            norm = float(np.linalg.norm(blend))
            if norm < _BLEND_FLOOR:
                raise DegeneratePrototype(
                    f"blend for prototype ({c}, {k}) has norm {norm!r}")
            unit = blend / norm
            new_protos[c, k] = unit
            contributors = np.flatnonzero(w_c[:, k] != 0.0)
            pathway.entries.append(PathwayEntry(
                class_id=int(c), proto_id=k,
                sample_indices=idx[contributors],
                weights=w_c[contributors, k].copy(),
                blend=blend, norm=norm, unit=unit))

    return PrototypeBank(new_protos, alpha, pathway), pathway


def detach(bank: PrototypeBank) -> PrototypeBank:
    """Same values, gradient pathway discarded. Idempotent."""
    return PrototypeBank(prototypes=bank.prototypes, alpha=bank.alpha,
                         pathway=None)
