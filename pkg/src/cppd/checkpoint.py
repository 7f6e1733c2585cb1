"""Binary checkpoint format.

    magic   b"CPPD"
    version u32 LE
    count   u32 LE
    count x tensor:
        name_len u16, name utf-8, dtype u8 (0=f32, 1=f64), rank u8,
        dims u32 x rank, raw little-endian row-major data

The model configuration travels in a text sidecar ``<checkpoint>.cfg``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .io_utils import atomic_write_bytes, atomic_write_text

MAGIC = b"CPPD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {torch.float32: 0, torch.float64: 1}


class CheckpointError(RuntimeError):
    pass


def encode_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {t.dtype}")
        tag = _TAGS[t.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype(_DTYPES[tag], copy=False).tobytes())
    return b"".join(parts)


def decode_tensors(raw: bytes) -> dict[str, torch.Tensor]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a CPPD checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            if tag not in _DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise CheckpointError(f"tensor {name!r}: truncated data")
            arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
            pos += nbytes
            out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last tensor")
    return out


def sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".cfg")


def save_checkpoint(model, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_tensors(model.state_dict()))
    atomic_write_text(sidecar(path), model.cfg.to_text())
    return path


def load_checkpoint(path, seed: int = 0):
    from .variants import build_model

    path = Path(path)
    try:
        raw = path.read_bytes()
        cfg_text = sidecar(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file {e.filename}") from None
    cfg = ModelConfig.from_text(cfg_text)
    model = build_model(cfg, seed)
    tensors = decode_tensors(raw)
    expected = model.state_dict()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor names do not match the model (missing {missing}, unexpected {extra})")
    model.load_state_dict({k: v.to(expected[k].dtype) for k, v in tensors.items()})
    model.eval()
    return model
