"""NDT1 binary tensor files: magic, u32 rank, u64 extents, raw little-endian float64."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NDT1"


def write_array(fh, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f8", copy=False).tobytes())


def read_array(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor file magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8", count=count)
    return data.astype(np.float64).reshape(shape)


def save(path, arr: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)
