"""Binary checkpoint format: named float32 arrays with a trailing CRC.

Layout (little-endian): magic "RNAT", u32 version, u32 array count; per
array a u16 name length, the UTF-8 name, a u8 rank, the dims as u64, then
the row-major float32 payload; finally a u32 CRC32 of all preceding bytes.
"""

from __future__ import annotations

import io
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RNAT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(arrays: Mapping[str, np.ndarray] | "object", path: str | Path) -> None:
    """Write named arrays (or a ParameterStore) to `path`."""
    if hasattr(arrays, "items") and not isinstance(arrays, Mapping):
        items = [(name, t.data) for name, t in arrays.items()]  # ParameterStore
    elif isinstance(arrays, Mapping):
        items = list(arrays.items())
    else:
        items = [(name, t.data) for name, t in arrays.items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(data.tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError(f"checkpoint too short: {path}")
    payload, crc_bytes = raw[:-4], raw[-4:]
    (crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"checkpoint CRC mismatch: {path}")
    if payload[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic: {path}")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}Q", payload, offset)
        offset += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        out[name] = arr.reshape(dims).astype(np.float32)
    if offset != len(payload):
        raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    return out
