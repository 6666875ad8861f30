"""Binary containers for datasets and trained models, plus score CSVs.

Both formats are little-endian with a magic prefix and a version word.

Embedding file::

    "PALM" | u32 version=1 | u64 count | u32 dim | u8 labeled
    then per record: dim * float32, followed by i32 label iff labeled

Model file::

    "PALMMODL" | u32 version=1
    u64-length-prefixed sections, in order:
      config JSON, encoder tensors, prototype bank,
      then three optional sections each preceded by a u8 presence flag:
      gaussian fit, optimizer state, reference embeddings (for KNN).

Writes are atomic (temp file + rename). Round-trips are byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .errors import InvalidInput
from .geometry import EmbeddingBatch
from .prototypes import PrototypeBank
from .scoring import GaussianFit
from .trainer import TrainConfig, config_from_dict

EMBED_MAGIC = b"PALM"
MODEL_MAGIC = b"PALMMODL"
FORMAT_VERSION = 1


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Embedding files
# ---------------------------------------------------------------------------

def embeddings_to_bytes(batch: EmbeddingBatch) -> bytes:
    x = np.ascontiguousarray(batch.x, dtype="<f4")
    count, dim = x.shape
    labeled = batch.labels is not None
    head = EMBED_MAGIC + struct.pack("<IQIB", FORMAT_VERSION, count, dim,
                                     1 if labeled else 0)
    if not labeled:
        return head + x.tobytes()
    labels = np.asarray(batch.labels)
    if np.any(labels < 0):
        raise InvalidInput("labels must be >= 0")
    rec = np.empty(count, dtype=[("x", "<f4", (dim,)), ("y", "<i4")])
    rec["x"] = x
    rec["y"] = labels.astype("<i4")
    return head + rec.tobytes()


def embeddings_from_bytes(payload: bytes) -> EmbeddingBatch:
    head_len = len(EMBED_MAGIC) + struct.calcsize("<IQIB")
    if len(payload) < head_len or payload[:4] != EMBED_MAGIC:
        raise InvalidInput("not an embedding file (bad magic)")
    version, count, dim, labeled = struct.unpack("<IQIB", payload[4:head_len])
    if version != FORMAT_VERSION:
        raise InvalidInput(f"unsupported embedding file version {version}")
    if labeled not in (0, 1):
        raise InvalidInput("label flag must be 0 or 1")
    body = payload[head_len:]
    if labeled:
        dtype = np.dtype([("x", "<f4", (dim,)), ("y", "<i4")])
    else:
        dtype = np.dtype(("<f4", (dim,)))
    if len(body) != count * dtype.itemsize:
        raise InvalidInput(
            f"declared {count} records of {dtype.itemsize} bytes, "
            f"found {len(body)} payload bytes")
    rec = np.frombuffer(body, dtype=dtype)
    if labeled:
        labels = rec["y"].astype(np.int64)
        if np.any(labels < 0):
            raise InvalidInput("labels must be >= 0")
        return EmbeddingBatch(x=rec["x"].astype(np.float64), labels=labels)
    return EmbeddingBatch(x=rec.astype(np.float64), labels=None)


def write_embeddings(path: str, batch: EmbeddingBatch) -> None:
    _atomic_write(path, embeddings_to_bytes(batch))


def _read_csv_embeddings(path: str) -> EmbeddingBatch:
    rows, labels = [], []
    labeled = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            try:
                values = [float(p) for p in parts]
            except ValueError as err:
                raise InvalidInput(f"line {lineno}: {err}") from err
            has_label = values[-1] == int(values[-1]) and "." not in parts[-1]
            if labeled is None:
                labeled = has_label and len(values) > 1
            if labeled:
                rows.append(values[:-1])
                labels.append(int(values[-1]))
            else:
                rows.append(values)
    if not rows:
        raise InvalidInput("empty embedding CSV")
    x = np.asarray(rows, dtype=np.float64)
    if labeled:
        return EmbeddingBatch(x=x, labels=np.asarray(labels, dtype=np.int64))
    return EmbeddingBatch(x=x, labels=None)


def read_embeddings(path: str) -> EmbeddingBatch:
    """Load a .palm binary container, or a CSV (``v1,...,vD[,label]``)."""
    if path.endswith(".csv"):
        return _read_csv_embeddings(path)
    with open(path, "rb") as fh:
        return embeddings_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Everything a trained model needs at scoring time."""

    model: enc.MlpModel
    bank: PrototypeBank
    config: TrainConfig
    gaussian_fit: GaussianFit | None = None
    optimizer: enc.OptimizerState | None = None
    reference_z: np.ndarray | None = None


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, payload: bytes):
        self.buf = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise InvalidInput("model file truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        flat = np.frombuffer(self.take(8 * n), dtype="<f8")
        return flat.reshape(shape).astype(np.float64)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _pack_layers(layers: list[enc.Layer]) -> bytes:
    out = struct.pack("<I", len(layers))
    for layer in layers:
        out += _pack_tensor(layer.w) + _pack_tensor(layer.b)
    return out


def _read_layers(reader: _Reader) -> list[enc.Layer]:
    (count,) = reader.unpack("<I")
    return [enc.Layer(w=reader.tensor(), b=reader.tensor())
            for _ in range(count)]


def _section(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def model_to_bytes(bundle: ModelBundle) -> bytes:
    out = MODEL_MAGIC + struct.pack("<I", FORMAT_VERSION)
    out += _section(bundle.config.to_json().encode())
    out += _section(_pack_layers(bundle.model.encoder)
                    + _pack_layers(bundle.model.projector))

    bank = bundle.bank
    c, k, d = bank.prototypes.shape
    out += _section(struct.pack("<IIId", c, k, d, bank.alpha)
                    + _pack_tensor(bank.prototypes))

    if bundle.gaussian_fit is None:
        out += struct.pack("<B", 0)
    else:
        fit = bundle.gaussian_fit
        out += struct.pack("<B", 1)
        out += _section(struct.pack("<d", fit.shrinkage)
                        + _pack_tensor(fit.means) + _pack_tensor(fit.covariance))

    if bundle.optimizer is None:
        out += struct.pack("<B", 0)
    else:
        st = bundle.optimizer
        body = struct.pack("<dddII", st.base_lr, st.momentum, st.weight_decay,
                           st.epoch, st.total_epochs)
        body += _pack_layers(st.buffers.encoder) + _pack_layers(st.buffers.projector)
        out += struct.pack("<B", 1) + _section(body)

    if bundle.reference_z is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1) + _section(_pack_tensor(bundle.reference_z))
    return out


def model_from_bytes(payload: bytes) -> ModelBundle:
    if payload[:8] != MODEL_MAGIC:
        raise InvalidInput("not a model file (bad magic)")
    reader = _Reader(payload)
    reader.take(8)
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise InvalidInput(f"unsupported model file version {version}")

    def section() -> _Reader:
        (length,) = reader.unpack("<Q")
        return _Reader(reader.take(length))

    config = config_from_dict(json.loads(section().buf.decode()))

    params = section()
    model = enc.MlpModel(encoder=_read_layers(params),
                         projector=_read_layers(params))

    bank_sec = section()
    c, k, d, alpha = bank_sec.unpack("<IIId")
    protos = bank_sec.tensor()
    if protos.shape != (c, k, d):
        raise InvalidInput("prototype payload disagrees with its header")
    bank = PrototypeBank(prototypes=protos, alpha=alpha)

    fit = None
    if reader.unpack("<B")[0]:
        sec = section()
        (shrinkage,) = sec.unpack("<d")
        fit = GaussianFit(means=sec.tensor(), covariance=sec.tensor(),
                          shrinkage=shrinkage)

    optimizer = None
    if reader.unpack("<B")[0]:
        sec = section()
        base_lr, momentum, weight_decay, epoch, total = sec.unpack("<dddII")
        buffers = enc.Grads(encoder=_read_layers(sec),
                            projector=_read_layers(sec))
        optimizer = enc.OptimizerState(buffers=buffers, base_lr=base_lr,
                                       momentum=momentum,
                                       weight_decay=weight_decay,
                                       epoch=epoch, total_epochs=total)

    reference_z = None
    if reader.unpack("<B")[0]:
        reference_z = section().tensor()

    if not reader.done():
        raise InvalidInput("trailing bytes after model sections")
    return ModelBundle(model=model, bank=bank, config=config,
                       gaussian_fit=fit, optimizer=optimizer,
                       reference_z=reference_z)


def write_model(path: str, bundle: ModelBundle) -> None:
    _atomic_write(path, model_to_bytes(bundle))


def read_model(path: str) -> ModelBundle:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Score CSVs
# ---------------------------------------------------------------------------

def write_scores_csv(path: str, scores: np.ndarray) -> None:
    lines = ["index,score"]
    lines += [f"{i},{float(s)!r}" for i, s in enumerate(scores)]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_scores_csv(path: str) -> np.ndarray:
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and line.lower().startswith("index"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise InvalidInput(f"line {lineno}: expected 'index,score'")
            try:
                values.append(float(parts[1]))
            except ValueError as err:
                raise InvalidInput(f"line {lineno}: {err}") from err
    if not values:
        raise InvalidInput("score CSV contains no rows")
    return np.asarray(values, dtype=np.float64)
