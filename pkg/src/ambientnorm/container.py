"""Binary tensor container (.cndt).

A file is a sequence of named records.  Each record is a u32 little-endian
name length, the UTF-8 name, then a tensor block:

    magic  b"CNDT"
    u8     version  (0x01)
    u8     dtype    (0x01 = float32 little-endian)
    u32    rank
    u64[rank]  extents
    f32[]  payload, row-major

End of file terminates the record table.  Text payloads (e.g. a checkpoint's
config record) are carried as 1-d tensors of UTF-8 byte values, which stay
inside the single supported dtype.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"CNDT"
VERSION = 1
DTYPE_F32 = 1


class ContainerError(ValueError):
    """Malformed or truncated container file."""


def _write_block(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", VERSION, DTYPE_F32))
    # note: shape taken before ascontiguousarray, which promotes rank 0 to 1
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container while reading {what}")
    return buf


def _read_block(fh, name: str) -> np.ndarray:
    magic = _read_exact(fh, 4, f"magic of record '{name}'")
    if magic != MAGIC:
        raise ContainerError(f"record '{name}' has bad magic {magic!r}")
    version, dtype = struct.unpack("<BB", _read_exact(fh, 2, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if dtype != DTYPE_F32:
        raise ContainerError(f"unsupported dtype byte {dtype}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "extent"))[0] for _ in range(rank))
    count = 1
    for extent in shape:
        count *= extent
    payload = _read_exact(fh, 4 * count, f"payload of record '{name}'")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as one container, in mapping order."""
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            _write_block(fh, np.asarray(arr))


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read every record; insertion order matches file order."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ContainerError("truncated container while reading record name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            out[name] = _read_block(fh, name)
    return out


def write_single(path: str | os.PathLike, name: str, arr: np.ndarray) -> None:
    write_tensors(path, {name: arr})


def read_single(path: str | os.PathLike) -> tuple[str, np.ndarray]:
    """Read a one-record container; errors if the file holds none or many."""
    table = read_tensors(path)
    if len(table) != 1:
        raise ContainerError(f"{path} holds {len(table)} records, expected exactly 1")
    return next(iter(table.items()))


def encode_text(text: str) -> np.ndarray:
    """UTF-8 text as a 1-d float array of byte values (exact for 0..255)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    values = np.asarray(arr).reshape(-1)
    return bytes(int(round(v)) for v in values).decode("utf-8")
