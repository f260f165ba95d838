"""Binary checkpoint files.

Layout (little endian)::

    b"IICN"  u16 version
    u32 len, JSON header  (network config, optimizer step, free-form meta)
    u32 record count
    per record: u16 len, name | u8 kind | 2s dtype | u8 ndim | u32 * ndim shape
                | u64 nbytes | raw data
    32-byte SHA-256 of everything above

Record kinds: 0 parameter, 1 first moment, 2 second moment, 3 buffer.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pipeline import IICNet, NetworkConfig
from .training import ParameterStore

MAGIC = b"IICN"
VERSION = 1
_DTYPES = {b"f8": np.dtype("<f8"), b"f4": np.dtype("<f4")}
KIND_PARAM, KIND_M, KIND_V, KIND_BUFFER = range(4)


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    net: IICNet
    store: ParameterStore
    meta: dict = field(default_factory=dict)


def _record(name: str, kind: int, arr: np.ndarray, dtype: bytes) -> bytes:
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
    enc = name.encode()
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<B2sB", kind, dtype, data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    raw = data.tobytes()
    return head + struct.pack("<Q", len(raw)) + raw


def encode_checkpoint(store: ParameterStore, config: NetworkConfig, *, dtype: str = "f8",
                      meta: dict | None = None) -> bytes:
    code = dtype.encode()
    if code not in _DTYPES:
        raise ValueError(f"dtype must be 'f8' or 'f4', got {dtype!r}")
    header = {"config": config.to_dict(), "step": store.step, "meta": meta or {}}
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    records = []
    for name, t in store:
        records.append(_record(name, KIND_PARAM, t.data, code))
        records.append(_record(name, KIND_M, store.state[name].m, code))
        records.append(_record(name, KIND_V, store.state[name].v, code))
    for name, arr in store.buffers.items():
        records.append(_record(name, KIND_BUFFER, arr, b"f8"))
    body = MAGIC + struct.pack("<H", VERSION) + struct.pack("<I", len(hjson)) + hjson
    body += struct.pack("<I", len(records)) + b"".join(records)
    return body + hashlib.sha256(body).digest()


def checkpoint_save(store: ParameterStore, path: str | os.PathLike, config: NetworkConfig, *,
                    dtype: str = "f8", meta: dict | None = None) -> None:
    blob = encode_checkpoint(store, config, dtype=dtype, meta=meta)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 32 or blob[:4] != MAGIC:
        if blob[:4] == MAGIC:
            raise ChecksumError("checkpoint is truncated")
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    config = NetworkConfig.from_dict(header["config"])
    net = IICNet(config)
    store = ParameterStore.from_network(net)
    store.step = int(header["step"])
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        kind, code, ndim = r.unpack("<B2sB")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if code not in _DTYPES:
            raise CheckpointError(f"record {name!r}: unknown dtype {code!r}")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape).astype(np.float64)
        if kind == KIND_BUFFER:
            net.set_buffer(name, arr)
            continue
        if name not in store.params:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if store.params[name].shape != arr.shape:
            raise CheckpointError(f"parameter {name!r}: shape {arr.shape} != {store.params[name].shape}")
        if kind == KIND_PARAM:
            store.params[name].data = arr
        elif kind == KIND_M:
            store.state[name].m = arr
        elif kind == KIND_V:
            store.state[name].v = arr
        else:
            raise CheckpointError(f"record {name!r}: unknown kind {kind}")
        seen.add((name, kind))
    missing = [n for n in store.params if (n, KIND_PARAM) not in seen]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing[:3]}...")
    store.buffers.update(net.named_buffers())
    return Checkpoint(config, net, store, header.get("meta", {}))


def checkpoint_load(path: str | os.PathLike) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)
