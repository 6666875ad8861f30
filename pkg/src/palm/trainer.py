"""Training loop: forward, assign, prune, EMA update, losses, backprop, detach.

Every iteration follows the same order: embed the batch, compute
stop-gradient assignment weights, move the prototypes by EMA (opening a
gradient pathway from prototypes back to this batch), evaluate the
combined loss on the *updated* prototypes, backpropagate through the
embeddings, the sphere projection, and the EMA pathway, take an SGD
step, then detach the bank for the next iteration.

All randomness flows from ``config.seed``: model init, bank init, and
each epoch's shuffling/augmentation use separately keyed generators, so
a run can be resumed from a checkpoint bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import encoder as enc
from .assignment import WeightTable, build_weight_table, sinkhorn_assign
from .errors import InvalidConfiguration, InvalidInput
from .geometry import EmbeddingBatch
from .losses import palm_loss, unsup_swapped_loss
from .prototypes import PrototypeBank, detach, ema_update, init_uniform


@dataclass
class TrainConfig:
    """Every knob of the training pipeline, with library defaults."""

    mode: str = "supervised"
    num_classes: int | None = None      # inferred from labels when None
    num_prototypes: int = 6             # K, prototypes per class
    k_top: int = 5                      # assignments kept per sample
    tau: float = 0.1                    # likelihood temperature
    tau_p: float = 0.5                  # prototype-contrast temperature
    lam: float = 1.0                    # weight of the contrastive term
    alpha: float = 0.999                # EMA momentum
    epsilon: float = 0.05               # Sinkhorn entropic regularization
    sinkhorn_iters: int = 3             # 0 means iterate to convergence
    batch_size: int = 128
    epochs: int = 100
    base_lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-6
    seed: int = 0
    assignment_mode: str = "soft"       # soft | hard
    ema_enabled: bool = True            # False: replace by the batch mean
    augment_sigma: float = 0.1          # unsupervised view noise
    encoder_hidden: tuple = (64, 32)
    proj_dim: int = 16

    def __post_init__(self):
        if self.mode not in ("supervised", "unsupervised"):
            raise InvalidConfiguration(f"unknown mode {self.mode!r}")
        if self.assignment_mode not in ("soft", "hard"):
            raise InvalidConfiguration(
                f"unknown assignment_mode {self.assignment_mode!r}")
        if self.num_prototypes < 1:
            raise InvalidConfiguration("num_prototypes must be >= 1")
        if not 1 <= self.k_top <= self.num_prototypes:
            raise InvalidConfiguration("k_top must lie in [1, num_prototypes]")
        if min(self.tau, self.tau_p, self.epsilon) <= 0:
            raise InvalidConfiguration("tau, tau_p, epsilon must be > 0")
        if self.lam < 0 or self.augment_sigma < 0 or self.weight_decay < 0:
            raise InvalidConfiguration(
                "lam, augment_sigma, weight_decay must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfiguration("alpha must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfiguration("momentum must lie in [0, 1)")
        if self.sinkhorn_iters < 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfiguration("sinkhorn_iters/batch_size/epochs out of range")
        if self.num_classes is not None and self.num_classes < 1:
            raise InvalidConfiguration("num_classes must be >= 1")
        self.encoder_hidden = tuple(int(v) for v in self.encoder_hidden)

    def to_json(self) -> str:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return json.dumps(d, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# JSON configs may say "lambda"; the dataclass field is ``lam``.
_FIELD_ALIASES = {"lambda": "lam"}


def config_from_dict(raw: dict) -> TrainConfig:
    """Build a config from JSON keys; unknown keys are a hard error."""
    valid = set(TrainConfig.__dataclass_fields__)
    kwargs = {}
    for key, value in raw.items():
        name = _FIELD_ALIASES.get(key, key)
        if name not in valid:
            raise InvalidConfiguration(f"unknown config key {key!r}")
        kwargs[name] = value
    return TrainConfig(**kwargs)


@dataclass
class Checkpoint:
    model: enc.MlpModel
    bank: PrototypeBank
    optimizer: enc.OptimizerState
    epoch: int
    config: TrainConfig

    def config_hash(self) -> str:
        return self.config.config_hash()


def _rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return _rng(seed, 2 + epoch)


def init_state(config: TrainConfig, input_dim: int,
               num_classes: int) -> tuple[enc.MlpModel, PrototypeBank, enc.OptimizerState]:
    enc_sizes = [input_dim, *config.encoder_hidden]
    proj_sizes = [enc_sizes[-1], config.proj_dim]
    model = enc.init_model(enc_sizes, proj_sizes, _rng(config.seed, 0))
    alpha = config.alpha if config.ema_enabled else 0.0
    bank_classes = 1 if config.mode == "unsupervised" else num_classes
    bank = init_uniform(bank_classes, config.num_prototypes, config.proj_dim,
                        _rng(config.seed, 1), alpha=alpha)
    state = enc.init_optimizer(model, config.base_lr, config.momentum,
                               config.weight_decay, config.epochs)
    return model, bank, state


def _assignment_entropy(table, labels) -> float:
    rows = table.own_rows(np.asarray(labels))
    sums = rows.sum(axis=1, keepdims=True)
    q = rows / np.where(sums > 0, sums, 1.0)
    logq = np.log(q, out=np.zeros_like(q), where=q > 0)
    return float(-np.sum(q * logq, axis=1).mean())


def train_step(model, bank, batch: EmbeddingBatch, config: TrainConfig,
               state) -> tuple[enc.MlpModel, PrototypeBank, dict]:
    """One supervised iteration. The bank must arrive detached."""
    if bank.attached:
        raise InvalidInput("bank must be detached at the start of a step")
    if batch.labels is None:
        raise InvalidInput("supervised step needs labels")

    h, z, cache = enc.forward(model, batch.x)
    batch.h, batch.z = h, z
    table = build_weight_table(batch, bank, config.epsilon,
                               config.sinkhorn_iters, config.k_top,
                               assignment_mode=config.assignment_mode)
    old_protos = bank.prototypes
    bank_updated, pathway = ema_update(bank, z, batch.labels, table)
    loss = palm_loss(batch, bank_updated, table, config.tau, config.tau_p,
                     config.lam)
    grads = enc.backward(model, cache, loss.grad_z)
    model = enc.sgd_step(model, grads, state)
    bank = detach(bank_updated)

    drift = 0.0
    if pathway.entries:
        drift = float(np.mean([
            np.linalg.norm(e.unit - old_protos[e.class_id, e.proto_id])
            for e in pathway.entries]))
    diag = {
        "loss": loss.value,
        "mle": loss.diagnostics.get("mle", loss.value),
        "proto_contra": loss.diagnostics.get("proto_contra", 0.0),
        "assign_entropy": _assignment_entropy(table, batch.labels),
        "proto_drift": drift,
    }
    return model, bank, diag


def train_unsupervised_step(model, bank, batch_x: np.ndarray,
                            config: TrainConfig, state,
                            rng: np.random.Generator):
    """One swapped-assignment iteration over the global prototype pool."""
    if bank.attached:
        raise InvalidInput("bank must be detached at the start of a step")
    if bank.num_classes != 1:
        raise InvalidInput("unsupervised training uses a single global pool")

    batch_x = np.asarray(batch_x, dtype=np.float64)
    noise = rng.standard_normal(batch_x.shape)
    x_aug = batch_x + config.augment_sigma * noise

    h, z, cache = enc.forward(model, batch_x)
    h_aug, z_aug, cache_aug = enc.forward(model, x_aug)
    b = z.shape[0]

    # Per-view balanced assignments; columns rescaled so each sample's
    # weights over the K prototypes sum to one.
    w_from_z = sinkhorn_assign(bank.prototypes[0], z, config.epsilon,
                               config.sinkhorn_iters).weights.T * b
    w_from_aug = sinkhorn_assign(bank.prototypes[0], z_aug, config.epsilon,
                                 config.sinkhorn_iters).weights.T * b

    table = WeightTable(weights=w_from_z[:, None, :])
    old_protos = bank.prototypes
    bank_updated, pathway = ema_update(bank, z, np.zeros(b, dtype=np.int64),
                                       table)
    loss = unsup_swapped_loss(z, z_aug, weights_for_z=w_from_aug,
                              weights_for_aug=w_from_z, bank=bank_updated,
                              tau=config.tau)
    grads = enc.add_grads(
        enc.backward(model, cache, loss.grad_z),
        enc.backward(model, cache_aug, loss.diagnostics["grad_z_aug"]))
    model = enc.sgd_step(model, grads, state)
    bank = detach(bank_updated)

    drift = 0.0
    if pathway.entries:
        drift = float(np.mean([
            np.linalg.norm(e.unit - old_protos[e.class_id, e.proto_id])
            for e in pathway.entries]))
    diag = {"loss": loss.value, "mle": loss.value, "proto_contra": 0.0,
            "assign_entropy": 0.0, "proto_drift": drift}
    return model, bank, diag


def train(config: TrainConfig, dataset: EmbeddingBatch,
          resume: Checkpoint | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run the epoch loop; returns the final checkpoint and per-epoch history.

    In supervised mode the dataset must be labeled. Per-epoch shuffling
    and augmentation noise are keyed by (seed, epoch), so resuming from a
    checkpoint replays the remaining epochs exactly.
    """
    supervised = config.mode == "supervised"
    if supervised and dataset.labels is None:
        raise InvalidInput("supervised training requires labeled data")

    n = len(dataset)
    if supervised:
        labels = np.asarray(dataset.labels)
        num_classes = config.num_classes or int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= num_classes:
            raise InvalidInput("labels outside [0, num_classes)")
    else:
        num_classes = 1

    if resume is not None:
        model, bank, state = resume.model, resume.bank, resume.optimizer
        start_epoch = resume.epoch
    else:
        model, bank, state = init_state(config, dataset.x.shape[1], num_classes)
        start_epoch = 0

    history: list[dict] = []
    for epoch in range(start_epoch, config.epochs):
        state.epoch = epoch
        rng = _epoch_rng(config.seed, epoch)
        perm = rng.permutation(n)
        sums: dict[str, float] = {}
        steps = 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            if supervised:
                batch = EmbeddingBatch(x=dataset.x[idx], labels=labels[idx])
                model, bank, diag = train_step(model, bank, batch, config, state)
            else:
                model, bank, diag = train_unsupervised_step(
                    model, bank, dataset.x[idx], config, state, rng)
            for key, val in diag.items():
                sums[key] = sums.get(key, 0.0) + val
            steps += 1
        row = {"epoch": epoch, "lr": state.lr}
        row.update({k: v / steps for k, v in sums.items()})
        history.append(row)

    state.epoch = config.epochs
    ckpt = Checkpoint(model=model, bank=bank, optimizer=state,
                      epoch=config.epochs, config=config)
    return ckpt, history
