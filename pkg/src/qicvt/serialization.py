"""Binary tensor records: little-endian ``rank:u32``, ``extents:u32*rank``, raw floats.

The float width is not stored; each file format fixes it (scene images use
32-bit, checkpoints 64-bit).
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

_U32 = struct.Struct("<I")


def write_u32(f: BinaryIO, value: int):
    f.write(_U32.pack(value))


def read_u32(f: BinaryIO) -> int:
    buf = f.read(4)
    if len(buf) != 4:
        raise EOFError("truncated u32")
    return _U32.unpack(buf)[0]


def write_str(f: BinaryIO, s: str):
    raw = s.encode("utf-8")
    write_u32(f, len(raw))
    f.write(raw)


def read_str(f: BinaryIO) -> str:
    n = read_u32(f)
    raw = f.read(n)
    if len(raw) != n:
        raise EOFError("truncated string")
    return raw.decode("utf-8")


def write_tensor(f: BinaryIO, arr: np.ndarray, dtype=np.float64):
    arr = np.asarray(arr)
    write_u32(f, arr.ndim)
    for s in arr.shape:
        write_u32(f, s)
    f.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_tensor(f: BinaryIO, dtype=np.float64) -> np.ndarray:
    rank = read_u32(f)
    shape = tuple(read_u32(f) for _ in range(rank))
    dt = np.dtype(dtype).newbyteorder("<")
    n = int(np.prod(shape)) if shape else 1
    raw = f.read(n * dt.itemsize)
    if len(raw) != n * dt.itemsize:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype)).reshape(shape)
