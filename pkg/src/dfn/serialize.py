"""Binary tensor format (``DFNT``).

Layout, little-endian: magic ``b"DFNT"``, u8 version (1), u8 dtype code
(0 = float32, 1 = float64), u8 rank, ``rank`` x u32 dims, then the raw values
in row-major order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

MAGIC = b"DFNT"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype} for DFNT")
    head = MAGIC + struct.pack("<BBB", VERSION, _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 7:
        raise FormatError("truncated tensor header", len(buf))
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("bad tensor magic, expected b'DFNT'", offset)
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    pos = offset + 7
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated tensor dims", len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated tensor payload: need {nbytes} bytes", len(buf))
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
    return arr.astype(dt.newbyteorder("="), copy=False), pos + nbytes


def write_tensor(arr: np.ndarray, fh: BinaryIO) -> None:
    fh.write(encode_tensor(arr))


def save_tensor(arr: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        write_tensor(arr, fh)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", end)
    return arr
