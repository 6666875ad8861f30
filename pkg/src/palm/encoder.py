"""A small MLP encoder/projector pair with hand-written backprop.

The encoder maps raw inputs to penultimate features ``h``; the projector
maps ``h`` to ``z'``, which is row-normalized onto the unit sphere to
give ``z``. Hidden layers are rectified, the last layer of each stack is
linear. Everything is float64 numpy; gradients are exact reverse-mode.

The optimizer is SGD with momentum, L2 weight decay folded into the
gradient, and a half-period cosine learning-rate schedule over epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVector, InvalidInput, NumericalError

_NORM_FLOOR = 1e-12


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


@dataclass
class MlpModel:
    """Encoder layers (last one emits h) and projector layers (emit z')."""

    encoder: list[Layer]
    projector: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.encoder[0].w.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1].w.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.projector[-1].w.shape[0]

    def layers(self) -> list[Layer]:
        return self.encoder + self.projector

    def copy(self) -> "MlpModel":
        return MlpModel(
            encoder=[Layer(l.w.copy(), l.b.copy()) for l in self.encoder],
            projector=[Layer(l.w.copy(), l.b.copy()) for l in self.projector])


def init_model(encoder_sizes: list[int], projector_sizes: list[int],
               rng: np.random.Generator) -> MlpModel:
    """Scaled-uniform fan-in init: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if len(encoder_sizes) < 2 or len(projector_sizes) < 2:
        raise InvalidInput("encoder and projector need at least one layer each")
    if encoder_sizes[-1] != projector_sizes[0]:
        raise InvalidInput("projector input width must equal encoder output width")

    def make(sizes):
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            layers.append(Layer(w, b))
        return layers

    return MlpModel(encoder=make(encoder_sizes), projector=make(projector_sizes))


@dataclass
class ForwardCache:
    x: np.ndarray
    enc_pre: list[np.ndarray]   # pre-activations per encoder layer
    enc_act: list[np.ndarray]   # inputs seen by each encoder layer
    proj_pre: list[np.ndarray]
    proj_act: list[np.ndarray]
    h: np.ndarray
    z_raw: np.ndarray
    z_norm: np.ndarray          # row norms of z_raw
    z: np.ndarray


def _run_stack(layers: list[Layer], x: np.ndarray):
    pres, acts = [], []
    a = x
    for i, layer in enumerate(layers):
        acts.append(a)
        pre = a @ layer.w.T + layer.b
        pres.append(pre)
        a = np.maximum(pre, 0.0) if i < len(layers) - 1 else pre
    return a, pres, acts


def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the full pipeline: returns (h, z, cache).

    Raises:
        NumericalError: non-finite activations anywhere.
        DegenerateVector: a projected row has (near-)zero norm.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InvalidInput(f"input must be (B, {model.input_dim})")

    h, enc_pre, enc_act = _run_stack(model.encoder, x)
    z_raw, proj_pre, proj_act = _run_stack(model.projector, h)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(z_raw))):
        raise NumericalError("non-finite activations in forward pass")

    norms = np.linalg.norm(z_raw, axis=1)
    if np.any(norms <= _NORM_FLOOR):
        bad = int(np.argmin(norms))
        raise DegenerateVector(f"projected embedding {bad} has norm {norms[bad]!r}")
    z = z_raw / norms[:, None]

    cache = ForwardCache(x=x, enc_pre=enc_pre, enc_act=enc_act,
                         proj_pre=proj_pre, proj_act=proj_act,
                         h=h, z_raw=z_raw, z_norm=norms, z=z)
    return h, z, cache


def _backprop_stack(layers: list[Layer], pres, acts, grad_out):
    grads = [None] * len(layers)
    g = grad_out
    for i in reversed(range(len(layers))):
        if i < len(layers) - 1:
            g = g * (pres[i] > 0.0)
        grads[i] = Layer(w=g.T @ acts[i], b=g.sum(axis=0))
        if i > 0:
            g = g @ layers[i].w
        else:
            g_in = g @ layers[i].w
    return grads, g_in


def backward(model: MlpModel, cache: ForwardCache, grad_z: np.ndarray,
             grad_h: np.ndarray | None = None) -> "Grads":
    """Exact parameter gradients given d(loss)/dz and optionally d(loss)/dh.

    Applies the sphere-projection Jacobian (z = z'/||z'||) first, then
    walks the projector and encoder stacks in reverse.
    """
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != cache.z.shape:
        raise InvalidInput("grad_z shape does not match forward cache")

    # Through row normalization: g' = (g - z (z.g)) / ||z'|| per row.
    inner = np.sum(cache.z * grad_z, axis=1, keepdims=True)
    grad_z_raw = (grad_z - cache.z * inner) / cache.z_norm[:, None]

    proj_grads, grad_h_from_proj = _backprop_stack(
        model.projector, cache.proj_pre, cache.proj_act, grad_z_raw)
    g_h = grad_h_from_proj
    if grad_h is not None:
        if grad_h.shape != cache.h.shape:
            raise InvalidInput("grad_h shape does not match forward cache")
        g_h = g_h + grad_h
    enc_grads, _ = _backprop_stack(model.encoder, cache.enc_pre, cache.enc_act, g_h)
    return Grads(encoder=enc_grads, projector=proj_grads)


@dataclass
class Grads:
    encoder: list[Layer]
    projector: list[Layer]

    def layers(self) -> list[Layer]:
        return self.encoder + self.projector


def zeros_like_model(model: MlpModel) -> Grads:
    return Grads(
        encoder=[Layer(np.zeros_like(l.w), np.zeros_like(l.b)) for l in model.encoder],
        projector=[Layer(np.zeros_like(l.w), np.zeros_like(l.b)) for l in model.projector])


def add_grads(a: Grads, b: Grads) -> Grads:
    return Grads(
        encoder=[Layer(x.w + y.w, x.b + y.b) for x, y in zip(a.encoder, b.encoder)],
        projector=[Layer(x.w + y.w, x.b + y.b) for x, y in zip(a.projector, b.projector)])


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Half-period cosine decay: base_lr at epoch 0, zero at epoch == total."""
    if not 0 <= epoch <= total_epochs:
        raise InvalidInput("epoch must lie in [0, total_epochs]")
    if total_epochs == 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / total_epochs))


@dataclass
class OptimizerState:
    """SGD-with-momentum buffers plus the schedule position."""

    buffers: Grads
    base_lr: float
    momentum: float
    weight_decay: float
    epoch: int = 0
    total_epochs: int = 1

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.epoch, self.total_epochs)


def init_optimizer(model: MlpModel, base_lr: float, momentum: float,
                   weight_decay: float, total_epochs: int) -> OptimizerState:
    return OptimizerState(buffers=zeros_like_model(model), base_lr=base_lr,
                          momentum=momentum, weight_decay=weight_decay,
                          epoch=0, total_epochs=max(total_epochs, 1))


def sgd_step(model: MlpModel, grads: Grads, state: OptimizerState) -> MlpModel:
    """buf <- m*buf + grad + wd*param; param <- param - lr*buf. In place."""
    lr = state.lr
    for layer, g, buf in zip(model.layers(), grads.layers(), state.buffers.layers()):
        buf.w *= state.momentum
        buf.w += g.w + state.weight_decay * layer.w
        buf.b *= state.momentum
        buf.b += g.b + state.weight_decay * layer.b
        layer.w -= lr * buf.w
        layer.b -= lr * buf.b
    return model
