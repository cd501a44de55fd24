"""Binary named-array container used by checkpoints and dataset export.

Layout (all integers little-endian):

    magic   4 bytes  b"DSR1"
    version u8       currently 1
    count   u32      number of records
    record, repeated ``count`` times, sorted by name:
        name_len u16
        name     UTF-8 bytes
        dtype    u8   (1 = float64)
        ndim     u8
        dims     ndim * u32
        payload  little-endian float64 values, row-major

Writing sorts records by name, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from typing import Dict, Mapping

import numpy as np

__all__ = [
    "ContainerError",
    "BadMagicError",
    "BadVersionError",
    "TruncatedError",
    "write_container",
    "read_container",
]

MAGIC = b"DSR1"
VERSION = 1
_DTYPE_F64 = 1


class ContainerError(Exception):
    """Malformed container file."""


class BadMagicError(ContainerError):
    pass


class BadVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def container_bytes(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ValueError(f"record name too long: {name!r}")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def write_container(path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(container_bytes(arrays))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise TruncatedError(f"needed {size} bytes at offset {self.pos}, "
                                 f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + size]
        self.pos += size
        return out


def read_container(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = struct.unpack("<B", r.take(1))[0]
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}, expected {VERSION}")
    count = struct.unpack("<I", r.take(4))[0]
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", r.take(2))[0]
        name = r.take(name_len).decode("utf-8")
        dtype_tag, ndim = struct.unpack("<BB", r.take(2))
        if dtype_tag != _DTYPE_F64:
            raise ContainerError(f"unknown dtype tag {dtype_tag} in {name!r}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        payload = r.take(8 * size)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    if r.pos != len(blob):
        raise ContainerError(f"{len(blob) - r.pos} trailing bytes after last record")
    return out
