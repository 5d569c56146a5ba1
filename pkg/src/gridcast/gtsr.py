"""Binary tensor files and the multi-tensor checkpoint container.

Single-tensor layout: magic bytes ``GTSR``, u8 version (=1), u8 rank,
little-endian u32 extents, then little-endian float32 values in row-major
order. A container is simply those records concatenated; tensor names live in
an accompanying JSON manifest, in the same order as the records.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import IntegrityError

MAGIC = b"GTSR"
VERSION = 1


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 0:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise IntegrityError(f"rank {arr.ndim} does not fit the format")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", VERSION, arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    header = fh.read(6)
    if len(header) < 6:
        raise IntegrityError("truncated tensor header")
    if header[:4] != MAGIC:
        raise IntegrityError(f"bad magic {header[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<BB", header[4:6])
    if version != VERSION:
        raise IntegrityError(f"unsupported tensor file version {version}")
    extents = []
    for _ in range(rank):
        raw = fh.read(4)
        if len(raw) < 4:
            raise IntegrityError("truncated extent list")
        extents.append(struct.unpack("<I", raw)[0])
    count = int(np.prod(extents, dtype=np.int64)) if extents else 1
    payload = fh.read(4 * count)
    if len(payload) < 4 * count:
        raise IntegrityError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(extents).copy()


def save(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_array(fh)
        if fh.read(1):
            raise IntegrityError(f"{path}: trailing bytes after tensor record")
    return arr


def save_container(path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_array(fh, arr)


def load_container(path, count: int) -> list[np.ndarray]:
    out = []
    try:
        with open(path, "rb") as fh:
            for _ in range(count):
                out.append(read_array(fh))
            if fh.read(1):
                raise IntegrityError(f"{path}: container has more records than the manifest lists")
    except IntegrityError as exc:
        raise IntegrityError(f"{Path(path)}: {exc}") from None
    return out
