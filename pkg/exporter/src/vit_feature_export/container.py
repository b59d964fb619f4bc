"""Writer for the .cndt multi-tensor container.

Record layout: u32 little-endian name length, UTF-8 name, then a tensor
block of magic b"CNDT", version 0x01, dtype 0x01 (f32 LE), u32 rank,
u64 extents, row-major payload.  This mirrors the consumer side exactly;
the exporter only ever writes.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"CNDT"
VERSION = 1
DTYPE_F32 = 1


def write_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write all records atomically (temp file + rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(MAGIC)
            fh.write(struct.pack("<BB", VERSION, DTYPE_F32))
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)
