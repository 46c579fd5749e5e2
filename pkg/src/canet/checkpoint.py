"""Binary checkpoint format.

Layout (little-endian)::

    b"CANT"  u32 version
    u32 len  config JSON (model config, adapter serial, free-form meta)
    u32 count, then per dataset: u32 len, UTF-8 id
    u32 count, then per tensor record:
        u32 len, UTF-8 name, u8 dtype tag, u8 rank, u32 dims[rank], raw payload
    u32 CRC32 of every preceding byte

Dtype tag 0 marks running statistics that do not exist yet (no dims, no
payload).
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import CANetModel, ModelConfig
from .nn import BNBank

__all__ = ["CheckpointError", "FORMAT_VERSION", "MAGIC", "save_checkpoint", "load_checkpoint", "read_records"]

MAGIC = b"CANT"
FORMAT_VERSION = 1
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


def _state(model: CANetModel) -> List[Tuple[str, Optional[np.ndarray]]]:
    items = [(name, p.data) for name, p in model.named_parameters()]
    items += list(model.named_buffers())
    return items


def _encode_record(name: str, arr: Optional[np.ndarray]) -> bytes:
    raw = name.encode("utf-8")
    out = [struct.pack("<I", len(raw)), raw]
    if arr is None:
        out.append(struct.pack("<BB", 0, 0))
        return b"".join(out)
    tag = _TAG_OF.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    out.append(struct.pack("<BB", tag, arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return b"".join(out)


def encode(model: CANetModel, meta: Optional[dict] = None) -> bytes:
    meta = getattr(model, "meta", {}) if meta is None else meta
    header = json.dumps({"model": model.config.to_dict(), "adapter_serial": model.adapter_serial, "meta": meta}, sort_keys=True)
    hraw = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(hraw)), hraw]
    ids = model.dataset_ids
    parts.append(struct.pack("<I", len(ids)))
    for ds in ids:
        raw = ds.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    state = _state(model)
    parts.append(struct.pack("<I", len(state)))
    parts += [_encode_record(name, arr) for name, arr in state]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: CANetModel, path, meta: Optional[dict] = None) -> None:
    """Write ``model``; ``meta`` is a JSON-serialisable dict stored in the config block."""
    data = encode(model, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"invalid UTF-8 string at offset {self.pos}") from None


def read_records(buf: bytes) -> Tuple[dict, List[str], Dict[str, Optional[np.ndarray]]]:
    """Validate and parse a checkpoint byte string into (header, dataset ids, records)."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: file is corrupted or truncated")
    r = _Reader(body)
    r.take(8)
    try:
        header = json.loads(r.string())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed config block: {exc}") from None
    (n_ids,) = r.unpack("<I")
    ids = [r.string() for _ in range(n_ids)]
    (n_rec,) = r.unpack("<I")
    records: Dict[str, Optional[np.ndarray]] = {}
    for _ in range(n_rec):
        name = r.string()
        tag, rank = r.unpack("<BB")
        if tag == 0:
            records[name] = None
            continue
        if tag not in _TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I")
        dt = _TAGS[tag]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        records[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after the last record")
    return header, ids, records


def load_checkpoint(path) -> CANetModel:
    """Rebuild a model from ``path``; raises :class:`CheckpointError` without returning a partial model."""
    with open(path, "rb") as f:
        buf = f.read()
    header, ids, records = read_records(buf)
    try:
        config = ModelConfig(**header["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config: {exc}") from None
    model = CANetModel(config)
    for ds in ids:
        model.add_dataset(ds)
    model.adapter_serial = int(header.get("adapter_serial", len(ids)))
    model.meta = dict(header.get("meta", {}))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if expected != set(records):
        missing = sorted(expected - set(records))[:3]
        extra = sorted(set(records) - expected)[:3]
        raise CheckpointError(f"record names do not match the model structure (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        arr = records[name]
        if arr is None or arr.shape != p.shape:
            raise CheckpointError(f"{name}: expected shape {p.shape}, found {None if arr is None else arr.shape}")
        p.data = arr
        p.momentum_buffer = np.zeros_like(arr)
    for bank_prefix, bank in _named_banks(model):
        for ds, entry in bank.entries.items():
            mean = records[f"{bank_prefix}{ds}.running_mean"]
            var = records[f"{bank_prefix}{ds}.running_var"]
            if (mean is None) != (var is None):
                raise CheckpointError(f"{bank_prefix}{ds}: running mean and variance must both be present or absent")
            if mean is not None and (mean.shape != (bank.channels,) or var.shape != (bank.channels,)):
                raise CheckpointError(f"{bank_prefix}{ds}: running statistics have the wrong length")
            entry.running_mean, entry.running_var = mean, var
    return model


def _named_banks(module, prefix: str = ""):
    for name, child in module.children():
        if isinstance(child, BNBank):
            yield f"{prefix}{name}.", child
        else:
            yield from _named_banks(child, f"{prefix}{name}.")
