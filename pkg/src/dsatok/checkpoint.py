"""Named-array checkpoint container.

Layout (all little-endian): magic ``DSAT``, u32 version, u32 array count, then
per array: u16 name length, UTF-8 name, u8 rank, u32 dims, f32 data. A CRC32 of
everything after the magic closes the file. Writes go through a temporary
file and a rename, so a crash never leaves a truncated checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DSAT"
VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = dict(arrays)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        items[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    parts = [struct.pack("<II", VERSION, len(items))]
    for name in sorted(items):
        arr = np.asarray(items[name], dtype="<f4")
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"array {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a DSAT checkpoint")
    payload, crc = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", payload, 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off, arrays = 8, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", payload, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arrays[name] = np.frombuffer(payload, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(payload):
        raise CheckpointError("trailing bytes in checkpoint")
    meta = None
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).astype(np.uint8).tobytes().decode("utf-8"))
    return arrays, meta


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write(path, encode_arrays(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_arrays(path.read_bytes())
