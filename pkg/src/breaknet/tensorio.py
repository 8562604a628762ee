"""Raw tensor files.

Layout: the 8-byte magic ``BNTENSR1``, then little-endian ``u32 rank``,
``u32 dims[rank]``, ``u8 dtype`` (0 = f32, 1 = f64) and the flat
row-major buffer.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"BNTENSR1"
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _TAGS:
        arr = arr.astype(np.float32)
    tag = _TAGS[arr.dtype]
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", tag)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise TensorFormatError("bad magic; not a BNTENSR1 file")
    pos = 8
    if len(buf) < pos + 4:
        raise TensorFormatError("truncated header")
    try:
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (tag,) = struct.unpack_from("<B", buf, pos)
        pos += 1
    except struct.error as exc:
        raise TensorFormatError(f"truncated header ({exc})") from exc
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - pos != count * dt.itemsize:
        raise TensorFormatError(
            f"payload holds {len(buf) - pos} bytes, expected {count * dt.itemsize} for shape {dims}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).astype(dt.newbyteorder("="))


def save(path: Union[str, os.PathLike], array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
