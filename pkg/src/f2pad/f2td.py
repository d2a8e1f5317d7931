"""Little-endian binary containers for tensors and index arrays.

Tensor file (``.f2td``)::

    b"F2TD" | u32 rank | u64 extent * rank | f64 payload (C order)

Index file (``.f2ti``), used for coreset indices and candidate sets::

    b"F2TI" | u32 rank | u64 extent * rank | u32 payload (C order)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"F2TD"
INDEX_MAGIC = b"F2TI"


class FormatError(ValueError):
    pass


def _encode(arr: np.ndarray, magic: bytes, dtype: str) -> bytes:
    arr = np.asarray(arr, dtype=dtype, order="C")  # keeps rank 0, unlike ascontiguousarray
    head = magic + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def _decode(buf: bytes, magic: bytes, dtype: str) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    itemsize = np.dtype(dtype).itemsize
    if len(buf) != off + count * itemsize:
        raise FormatError(f"payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).copy()


def dumps_tensor(arr) -> bytes:
    return _encode(np.asarray(arr), TENSOR_MAGIC, "<f8")


def loads_tensor(buf: bytes) -> np.ndarray:
    return _decode(buf, TENSOR_MAGIC, "<f8").astype(np.float64)


def dumps_index(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise FormatError("index values must fit in u32")
    return _encode(arr, INDEX_MAGIC, "<u4")


def loads_index(buf: bytes) -> np.ndarray:
    return _decode(buf, INDEX_MAGIC, "<u4").astype(np.int64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())


def save_index(path, arr) -> None:
    Path(path).write_bytes(dumps_index(arr))


def load_index(path) -> np.ndarray:
    return loads_index(Path(path).read_bytes())
