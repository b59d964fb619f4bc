"""Binary PPM (P6, 8-bit) reader/writer for human-viewable exports."""

from __future__ import annotations

import os

import numpy as np


class PpmError(ValueError):
    pass


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 3,H,W or 1,H,W float array in [0,1] as binary PPM.

    Values are quantized as round(255 * clip(v, 0, 1)); single-channel
    input is replicated to gray RGB.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise PpmError(f"write_ppm expects 3,H,W or 1,H,W, got shape {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    quant = np.rint(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    h, w = quant.shape[1], quant.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quant.transpose(1, 2, 0).tobytes())


def _read_token(fh) -> bytes:
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise PpmError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM into a 3,H,W float32 array in [0,1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise PpmError(f"{path} is not binary PPM (magic {magic!r})")
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise PpmError(f"only 8-bit PPM supported, maxval={maxval}")
        payload = fh.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise PpmError(f"truncated PPM payload in {path}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32)) / 255.0
