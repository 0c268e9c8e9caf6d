"""LMFT raw tensor records.

Layout, all little-endian: ``b"LMFT"``, u16 version, u8 dtype code
(0 = float32, 1 = float64), u8 rank, ``rank`` u32 dims, then the values in
C order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, HeaderError, TruncatedError, VersionError

MAGIC = b"LMFT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
MAX_RANK = 8
MAX_ELEMENTS = 1 << 31


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedError(f"LMFT {what}: expected {n} bytes, got {len(data)}")
    return data


def write_tensor(f, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in CODES:
        raise ValueError(f"LMFT stores float32 or float64 only, got {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise ValueError(f"LMFT rank is limited to {MAX_RANK}, got {arr.ndim}")
    code = CODES[arr.dtype]
    f.write(MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def read_tensor(f) -> np.ndarray:
    magic = f.read(4)
    if len(magic) < 4:
        raise TruncatedError(f"LMFT header: expected 4 magic bytes, got {len(magic)}")
    if magic != MAGIC:
        raise BadMagicError(f"LMFT: bad magic {magic!r}")
    version, code, rank = struct.unpack("<HBB", _read_exact(f, 4, "header"))
    if version != VERSION:
        raise VersionError(f"LMFT: unsupported version {version}")
    if code not in DTYPES:
        raise HeaderError(f"LMFT: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise HeaderError(f"LMFT: rank {rank} exceeds {MAX_RANK}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if count > MAX_ELEMENTS:
        raise HeaderError(f"LMFT: {count} elements exceeds the {MAX_ELEMENTS} limit")
    dtype = DTYPES[code]
    data = _read_exact(f, count * dtype.itemsize, "payload")
    return np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = read_tensor(buf)
    if buf.read(1):
        raise HeaderError("LMFT: trailing bytes after tensor payload")
    return arr


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
