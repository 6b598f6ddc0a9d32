"""Binary checkpoints.

Layout (all integers little-endian)::

    b"FAME\\x01"                       magic + format version
    u64 n, n bytes                     UTF-8 JSON header (config, seed, epoch, meta)
    u64 count                          number of tensor records
    count x record:
        u32 n, n bytes                 tensor name
        u32 rank, rank x i64           shape
        prod(shape) x f64              data

Tensors are always stored as 64-bit floats so float32 models round-trip
exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import FameConfig, build_model

MAGIC = b"FAME\x01"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: FameConfig
    tensors: dict  # name -> ndarray: parameters, BN running stats, optional "optim.*"
    seed: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    def header(self):
        return {"version": 1, "config": self.config.to_dict(), "seed": int(self.seed),
                "epoch": int(self.epoch), "meta": self.meta}

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def model_tensors(m):
    """Parameters followed by batch-norm buffers, as float64 copies."""
    out = {n: np.array(p.data, dtype=np.float64) for n, p in m.parameters().items()}
    out.update({n: np.array(b, dtype=np.float64) for n, b in m.buffers().items()})
    return out


def from_model(m, seed=None, epoch=0, optim=None, meta=None):
    """Snapshot a model (and optionally an optimizer state) into a :class:`Checkpoint`."""
    tensors = model_tensors(m)
    meta = dict(meta or {})
    if optim is not None:
        for n in optim.m:
            tensors[f"optim.m.{n}"] = np.array(optim.m[n], dtype=np.float64)
            tensors[f"optim.v.{n}"] = np.array(optim.v[n], dtype=np.float64)
        meta["optim"] = optim.hyper()
    return Checkpoint(m.config, tensors, m.seed if seed is None else seed, epoch, meta)


def to_model(ckpt):
    """Rebuild the model described by ``ckpt`` and load its tensors."""
    m = build_model(ckpt.config, ckpt.seed)
    params, buffers = m.parameters(), m.buffers()
    for name, target in list(params.items()) + list(buffers.items()):
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.tensors[name]
        current = target.data if hasattr(target, "data") and not isinstance(target, np.ndarray) else target
        if arr.shape != current.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config implies {current.shape}")
        current[...] = arr.astype(current.dtype)
    return m


def validate(ckpt):
    """Shapes of model tensors must match the shapes implied by the embedded config."""
    to_model(ckpt)


def dumps(ckpt):
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(header)), header, struct.pack("<Q", len(ckpt.tensors))]
    for name in ckpt.tensors:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data):
    r = _Reader(data)
    magic = r.take(len(MAGIC))
    if magic[:4] != MAGIC[:4]:
        raise CheckpointError("not a checkpoint (bad magic)")
    if magic != MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {magic[4]}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        cfg = FameConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = r.unpack("<Q")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last tensor record")
    ckpt = Checkpoint(cfg, tensors, header.get("seed", 0), header.get("epoch", 0), header.get("meta", {}))
    validate(ckpt)
    return ckpt


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
