"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"TCFCKPT\\0"
    version      uint32
    config_len   uint32, followed by that many bytes of UTF-8 JSON
    num_tensors  uint32
    per tensor:
        name_len uint16, name (UTF-8 parameter path, e.g. "stages.0.0.attn.q.weight")
        ndim     uint8, then ndim x uint32 dimensions
        data     prod(dims) x float32 little-endian, row-major

The JSON document holds ``{"model": <ModelConfig dict>, "meta": {...}}``.
"""
import json
import struct

import numpy as np
import torch

from .model import ModelConfig, TCFormer

MAGIC = b"TCFCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, meta=None):
    doc = json.dumps({"model": model.cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(doc)))
        f.write(doc)
        f.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            raw = name.encode()
            arr = t.detach().cpu().numpy().astype("<f4")
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def read_checkpoint(path):
    """Return ``(config_document, {name: float32 array})``."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, doc_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        return _parse(data, doc_len)
    except (struct.error, ValueError, IndexError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None


def _parse(data, doc_len):
    pos = 16
    doc = json.loads(data[pos:pos + doc_len].decode())
    pos += doc_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        ndim = data[pos]
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes")
    return doc, tensors


def load_checkpoint(path):
    """Rebuild the model; returns ``(model, meta)``."""
    doc, tensors = read_checkpoint(path)
    model = TCFormer(ModelConfig.from_dict(doc["model"]))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(tensors[k]).to(state[k].dtype) for k in state})
    model.eval()
    return model, doc.get("meta", {})
