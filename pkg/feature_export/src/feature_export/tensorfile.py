"""XCT1 tensor writer.

The downstream matching engine consumes this byte layout:

    magic   4 bytes  b"XCT1"
    dtype   1 byte   0 = float32, 1 = float64
    rank    1 byte
    dims    rank x uint32 little-endian
    payload product(dims) values, little-endian, row-major

This module is a standalone implementation of that wire format; the
format itself is the contract between the two packages.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"XCT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(arr: np.ndarray, dtype=None) -> bytes:
    arr = np.asarray(arr)
    target = np.dtype(dtype) if dtype is not None else arr.dtype
    if target not in _CODES:
        raise ValueError(f"unsupported dtype {target}; use float32 or float64")
    arr = np.ascontiguousarray(arr.astype(target, copy=False))
    header = MAGIC + struct.pack("<BB", _CODES[target], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype(target.newbyteorder("<"), copy=False).tobytes()


def write(path, arr: np.ndarray, dtype=None) -> None:
    Path(path).write_bytes(encode(arr, dtype))
