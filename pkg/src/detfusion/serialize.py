"""Portable on-disk tensor format used for checkpoints and fixtures.

Single tensor record (little-endian):

    rank      uint64
    extents   rank x uint64
    payload   product(extents) x float64, row-major

A named-tensor container prefixes a uint64 entry count, then for each entry
(sorted by name so files are byte-reproducible):

    name_len  uint64
    name      name_len bytes, UTF-8
    tensor    single tensor record
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor


def _coerce(arr):
    if isinstance(arr, Tensor):
        arr = arr.data
    return np.ascontiguousarray(np.asarray(arr, dtype=np.float64))


def write_tensor(fh, arr) -> None:
    arr = _coerce(arr)
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    raw = fh.read(8)
    if len(raw) != 8:
        raise ValueError("truncated tensor record: missing rank")
    rank = struct.unpack("<Q", raw)[0]
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated tensor record: expected {count} float64 values")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_tensor_dict(path, tensors) -> None:
    names = sorted(tensors)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, tensors[name])


def load_tensor_dict(path) -> dict:
    path = Path(path)
    out = {}
    with open(path, "rb") as fh:
        count = struct.unpack("<Q", fh.read(8))[0]
        for _ in range(count):
            name_len = struct.unpack("<Q", fh.read(8))[0]
            name = fh.read(name_len).decode("utf-8")
            out[name] = read_tensor(fh)
    return out
