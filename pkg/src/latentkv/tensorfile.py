"""Minimal binary tensor container.

Byte layout, little-endian throughout:

    magic   4 bytes  b"MLAF"
    version u16      currently 1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8
    dims    ndim * u64
    payload row-major values in the stated dtype

Keeps the artifact dependency-free and the byte format directly testable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .linalg import Array

MAGIC = b"MLAF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}
_HEADER = struct.Struct("<4sHBB")
_MAX_ELEMENTS = 1 << 40  # refuse absurd headers before allocating


class TensorFileError(Exception):
    """Raised for malformed or truncated tensor files."""


def save_tensor(path: str | Path, array: Array, dtype: str = "f64") -> None:
    """Write an array; ``f64`` round-trips bit-exact, ``f32`` narrows."""
    if dtype not in _CODES:
        raise ValueError(f"dtype must be one of {sorted(_CODES)}, got {dtype!r}")
    a = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    code = _CODES[dtype]
    payload = a.astype(_DTYPES[code], copy=False)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(payload.tobytes(order="C"))


def load_tensor(path: str | Path) -> Array:
    """Read a tensor back as float64, validating every header field."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise TensorFileError(f"{path}: truncated header")
    magic, version, code, ndim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    dims_end = _HEADER.size + 8 * ndim
    if len(data) < dims_end:
        raise TensorFileError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", data, _HEADER.size)
    count = 1
    for dim in dims:
        count *= dim
    if count > _MAX_ELEMENTS:
        raise TensorFileError(f"{path}: dims {dims} overflow sanity bound")
    dtype = _DTYPES[code]
    expected = dims_end + count * dtype.itemsize
    if len(data) != expected:
        raise TensorFileError(f"{path}: payload is {len(data) - dims_end} bytes, expected {count * dtype.itemsize}")
    flat = np.frombuffer(data, dtype=dtype, count=count, offset=dims_end)
    return flat.reshape(dims).astype(np.float64)
