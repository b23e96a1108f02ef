"""Bit-exact binary persistence for parameter stores.

Layout (little-endian, no padding):

    magic   4 bytes  "TLCP"
    version u32      1
    meta    u32 length + UTF-8 JSON document (config echo, seed, step)
    count   u32 number of tensors, then per tensor:
        name  u16 length + UTF-8 bytes
        dtype u8   0 = float32, 1 = float64
        rank  u8
        dims  rank x u32
        data  raw row-major values

Round trips are bit-identical: metadata is serialized canonically
(sorted keys, no whitespace) and tensors keep store order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import ParamStore

MAGIC = b"TLCP"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Base class for malformed or mismatched checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MetadataMismatchError(CheckpointError):
    pass


def _canonical_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(store: ParamStore, meta: dict, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = _canonical_meta(meta)
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(store)))
    for name, t in store.items():
        name_bytes = name.encode("utf-8")
        arr = t.data
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        code = _DTYPE_CODES[np.dtype(arr.dtype.str.replace(">", "<"))]
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.blob)})"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path, expect_meta: dict | None = None
                    ) -> tuple[ParamStore, dict]:
    """Load a checkpoint; all entries come back trainable (caller freezes).

    ``expect_meta`` entries, when given, must match the stored metadata
    exactly; a mismatch (typically the config echo or hash) is an error
    rather than a silent misload.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(
            f"{path}: unsupported checkpoint version {version}, expected {VERSION}"
        )
    meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
    store = ParamStore()
    for i in range(r.u32("tensor count")):
        what = f"tensor {i}"
        name = r.take(r.u16(what), f"{what} name").decode("utf-8")
        dtype_code = r.u8(f"{what} dtype")
        if dtype_code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        rank = r.u8(f"{what} rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{what} dims"))
        dtype = _CODE_DTYPES[dtype_code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(r.take(nbytes, f"{what} data"), dtype=dtype)
        store.add(name, arr.reshape(dims).copy())
    if r.pos != len(r.blob):
        raise CheckpointError(
            f"{path}: {len(r.blob) - r.pos} trailing bytes after tensor table"
        )
    if expect_meta:
        for key, expected in expect_meta.items():
            if meta.get(key) != expected:
                raise MetadataMismatchError(
                    f"{path}: metadata {key!r} is {meta.get(key)!r}, "
                    f"expected {expected!r}"
                )
    return store, meta
