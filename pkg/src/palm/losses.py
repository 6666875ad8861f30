"""Training objectives with analytic gradients.

All losses return a :class:`LossOutput` holding the scalar value and the
gradient with respect to the batch of projected embeddings ``z``. That
gradient has two parts: the direct dependence of the loss on ``z``, and
the indirect route through the current iteration's EMA prototype update
(prototypes are functions of ``z`` until the bank is detached). Assignment
weights are stop-gradient constants throughout.

Gradients here are ambient (B, D) vectors; composing with the
normalization Jacobian of z = z'/||z'|| happens in the encoder backward
pass, not here.

The likelihood term for a labeled batch:

    L_mle = -(1/N) sum_i log [ sum_k w_ik^{y_i} exp(p_k^{y_i}.z_i / tau)
                               / sum_c sum_k w_ik^c exp(p_k^c.z_i / tau) ]

The prototype-level contrastive term (anchors run over all prototypes;
positives are same-class peers, negatives are all prototypes of other
classes):

    L_pc = -(1/CK) sum_{c,k} log [ sum_{k' != k} exp(p_k^c.p_k'^c / tau_p)
                                   / sum_{c' != c, k''} exp(p_k^c.p_k''^{c'} / tau_p) ]

Both use max-shifted exponentials, which leaves values and gradients
mathematically unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfiguration, InvalidInput, NumericalError


@dataclass
class LossOutput:
    """Scalar loss plus d(loss)/d(z).

    ``grad_z`` is ``None`` when the loss has no route to the embeddings
    at all (a prototype-only loss evaluated on a detached bank).
    """

    value: float
    grad_z: np.ndarray | None
    diagnostics: dict = field(default_factory=dict)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"{what} is not finite: {value!r}")


def mle_loss(batch, bank, table, tau: float) -> LossOutput:
    """Negative log mixture posterior of each sample's own class.

    ``batch`` needs ``z`` (B, D) and ``labels`` (B,); ``bank`` should be
    attached so the EMA route contributes to ``grad_z``; ``table`` is the
    stop-gradient weight table (B, C, K).
    """
    if tau <= 0:
        raise InvalidConfiguration("tau must be > 0")
    z = batch.z
    labels = np.asarray(batch.labels)
    protos = bank.prototypes  # (C, K, D)
    w = table.weights         # (B, C, K)
    n = z.shape[0]
    if w.shape != (n, protos.shape[0], protos.shape[1]):
        raise InvalidInput("weight table shape does not match batch and bank")

    logits = np.einsum("bd,ckd->bck", z, protos) / tau
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits in mle_loss")
    shift = logits.max(axis=(1, 2))
    expo = np.exp(logits - shift[:, None, None])
    weighted = w * expo

    denom = weighted.sum(axis=(1, 2))
    numer = weighted[np.arange(n), labels].sum(axis=1)
    if np.any(numer <= 0.0) or not np.all(np.isfinite(denom)):
        raise NumericalError("own-class mixture mass vanished in mle_loss")

    per_sample = np.log(denom) - np.log(numer)
    value = float(per_sample.mean())
    _check_finite(value, "mle loss")

    # d(value)/d(logits), including the -log(numer) own-class part.
    coef = weighted / denom[:, None, None]
    own = weighted[np.arange(n), labels] / numer[:, None]
    coef[np.arange(n), labels] -= own
    coef /= n * tau

    grad_z = np.einsum("bck,ckd->bd", coef, protos)
    grad_p = np.einsum("bck,bd->ckd", coef, z)
    if bank.attached:
        grad_z = grad_z + bank.pathway.backprop_to_embeddings(grad_p, z.shape[1])

    return LossOutput(value=value, grad_z=grad_z,
                      diagnostics={"grad_prototypes": grad_p})


def proto_contrast_loss(bank, tau_p: float) -> LossOutput:
    """Contrast every prototype against same-class peers vs. other classes.

    The loss is a pure function of the prototype bank; embeddings receive
    gradients only through the EMA pathway of an attached bank (``grad_z``
    is ``None`` on a detached bank).
    """
    if tau_p <= 0:
        raise InvalidConfiguration("tau_p must be > 0")
    c_num, k_num, dim = bank.prototypes.shape
    if c_num < 2 or k_num < 2:
        raise InvalidConfiguration(
            f"prototype contrast needs C >= 2 and K >= 2, got C={c_num}, K={k_num}")

    flat = bank.prototypes.reshape(c_num * k_num, dim)
    a_num = c_num * k_num
    gram = (flat @ flat.T) / tau_p
    if not np.all(np.isfinite(gram)):
        raise NumericalError("non-finite prototype similarities")

    class_of = np.repeat(np.arange(c_num), k_num)
    same = class_of[:, None] == class_of[None, :]
    pos_mask = same & ~np.eye(a_num, dtype=bool)   # same class, not the anchor
    neg_mask = ~same                               # every other class, all K

    union = pos_mask | neg_mask
    shift = np.where(union, gram, -np.inf).max(axis=1)
    expo = np.exp(gram - shift[:, None])

    num = (expo * pos_mask).sum(axis=1)
    den = (expo * neg_mask).sum(axis=1)
    if np.any(num <= 0.0) or np.any(den <= 0.0):
        raise NumericalError("prototype contrast mass underflowed")

    value = float(np.mean(np.log(den) - np.log(num)))
    _check_finite(value, "prototype contrast loss")

    pair_coef = (expo * neg_mask) / den[:, None] - (expo * pos_mask) / num[:, None]
    pair_coef /= a_num * tau_p
    grad_flat = pair_coef @ flat + pair_coef.T @ flat
    grad_p = grad_flat.reshape(c_num, k_num, dim)

    grad_z = None
    if bank.attached:
        grad_z = bank.pathway.backprop_to_embeddings(grad_p, dim)
    return LossOutput(value=value, grad_z=grad_z,
                      diagnostics={"grad_prototypes": grad_p})


def palm_loss(batch, bank, table, tau: float, tau_p: float,
              lam: float) -> LossOutput:
    """Combined objective: mle term plus ``lam`` times the prototype term.

    When the bank has a single class or a single prototype per class the
    contrastive term has an empty positive set and is skipped (treated
    as zero), which keeps single-prototype ablations trainable.
    """
    if lam < 0:
        raise InvalidConfiguration("lam must be >= 0")
    mle = mle_loss(batch, bank, table, tau)
    c_num, k_num = bank.prototypes.shape[0], bank.prototypes.shape[1]
    if lam == 0.0 or c_num < 2 or k_num < 2:
        return LossOutput(value=mle.value, grad_z=mle.grad_z,
                          diagnostics={"mle": mle.value, "proto_contra": 0.0})
    contra = proto_contrast_loss(bank, tau_p)
    grad_z = mle.grad_z
    if contra.grad_z is not None:
        grad_z = grad_z + lam * contra.grad_z
    return LossOutput(value=mle.value + lam * contra.value, grad_z=grad_z,
                      diagnostics={"mle": mle.value, "proto_contra": contra.value})


def class_posterior(z: np.ndarray, bank, weights: np.ndarray,
                    tau: float) -> np.ndarray:
    """Posterior class probabilities of a single embedding, length C.

    ``weights`` is the (C, K) per-class weight block for this sample.
    """
    if tau <= 0:
        raise InvalidConfiguration("tau must be > 0")
    z = np.asarray(z, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    protos = bank.prototypes
    if weights.shape != protos.shape[:2]:
        raise InvalidInput("weights must be (C, K)")
    if np.any(weights < 0) or not np.any(weights > 0):
        raise NumericalError("weights must be nonnegative with positive mass")

    logits = np.einsum("ckd,d->ck", protos, z) / tau
    shift = logits.max()
    mass = (weights * np.exp(logits - shift)).sum(axis=1)
    total = mass.sum()
    if total <= 0 or not np.isfinite(total):
        raise NumericalError("posterior mass vanished")
    return mass / total


def _view_term(view: np.ndarray, weights: np.ndarray, protos: np.ndarray,
               tau: float):
    """Per-sample cross-entropy of the prototype softmax against weights.

    Returns (values, d/d(view), d/d(protos)) without the 1/(2N) factor.
    """
    scores = (view @ protos.T) / tau
    shift = scores.max(axis=1)
    expo = np.exp(scores - shift[:, None])
    total = expo.sum(axis=1)
    wmass = (weights * expo).sum(axis=1)
    if np.any(wmass <= 0.0) or not np.all(np.isfinite(total)):
        raise NumericalError("assignment mass vanished in swapped loss")
    values = np.log(total) - np.log(wmass)
    dscore = expo / total[:, None] - weights * expo / wmass[:, None]
    grad_view = dscore @ protos / tau
    grad_protos = dscore.T @ view / tau
    return values, grad_view, grad_protos


def unsup_swapped_loss(z: np.ndarray, z_aug: np.ndarray,
                       weights_for_z: np.ndarray, weights_for_aug: np.ndarray,
                       bank, tau: float) -> LossOutput:
    """Swapped-assignment objective over a single global prototype pool.

    Each view is pulled toward the prototypes weighted by the *other*
    view's assignments: ``weights_for_z`` were computed from ``z_aug``
    and ``weights_for_aug`` from ``z``. The softmax denominator runs
    unweighted over all K prototypes. ``grad_z`` covers the primary view
    (direct plus any EMA route); the augmented view's direct gradient is
    in ``diagnostics["grad_z_aug"]``.
    """
    if tau <= 0:
        raise InvalidConfiguration("tau must be > 0")
    z = np.asarray(z, dtype=np.float64)
    z_aug = np.asarray(z_aug, dtype=np.float64)
    if z.shape != z_aug.shape:
        raise InvalidInput("z and z_aug must be index-aligned with equal shapes")
    if bank.num_classes != 1:
        raise InvalidInput("swapped loss expects a single global prototype pool")
    protos = bank.prototypes[0]  # (K, D)
    k_num = protos.shape[0]
    n = z.shape[0]
    weights_for_z = np.asarray(weights_for_z, dtype=np.float64)
    weights_for_aug = np.asarray(weights_for_aug, dtype=np.float64)
    if weights_for_z.shape != (n, k_num) or weights_for_aug.shape != (n, k_num):
        raise InvalidInput("weight tables must be (N, K)")

    vals_z, gz, gp_z = _view_term(z, weights_for_z, protos, tau)
    vals_a, ga, gp_a = _view_term(z_aug, weights_for_aug, protos, tau)

    value = float(0.5 * (vals_z + vals_a).mean())
    _check_finite(value, "swapped loss")

    grad_z = gz / (2.0 * n)
    grad_z_aug = ga / (2.0 * n)
    grad_p = ((gp_z + gp_a) / (2.0 * n)).reshape(1, k_num, -1)
    if bank.attached:
        if bank.pathway.batch_size != n:
            raise InvalidInput("bank pathway does not match this batch")
        grad_z = grad_z + bank.pathway.backprop_to_embeddings(grad_p, z.shape[1])

    return LossOutput(value=value, grad_z=grad_z,
                      diagnostics={"grad_z_aug": grad_z_aug,
                                   "grad_prototypes": grad_p})
