"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SEQDETCK"            magic, 8 bytes
    u32                    format version
    u64                    payload length in bytes
    payload:
        u64                metadata length, then UTF-8 JSON metadata
        u32                number of arrays
        per array:         u32 name length, name bytes, u32 rank,
                           u64 per dimension, float32 data
    32 bytes               SHA-256 of the payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SEQDETCK"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def encode_checkpoint(arrays: Mapping[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"array {name!r} has dtype {arr.dtype}, expected float32")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"array {name!r} has non-finite values")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return _HEADER.pack(MAGIC, VERSION, len(payload)) + payload + hashlib.sha256(payload).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("malformed payload: read past end")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, shorter than the header")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {VERSION}")
    expected = _HEADER.size + length + 32
    if len(data) < expected:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise CheckpointError(f"{len(data) - expected} trailing bytes after checksum")
    payload = data[_HEADER.size : _HEADER.size + length]
    if hashlib.sha256(payload).digest() != data[-32:]:
        raise CheckpointChecksumError("payload checksum mismatch")

    r = _Reader(payload)
    (meta_len,) = r.unpack("<Q")
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    (n_arrays,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(payload):
        raise CheckpointError("malformed payload: unread bytes")
    return arrays, metadata


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], metadata: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(arrays, metadata))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
