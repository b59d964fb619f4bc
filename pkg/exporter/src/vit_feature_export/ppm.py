"""Minimal binary PPM (P6, 8-bit) reader."""

from __future__ import annotations

import os

import numpy as np


class PpmError(ValueError):
    pass


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
    """Binary PPM -> 3,H,W float32 in [0,1]."""
    with open(path, "rb") as fh:
        if fh.read(2) != b"P6":
            raise PpmError(f"{path} is not a binary PPM")
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise PpmError(f"only 8-bit PPM supported, maxval={maxval}")
        payload = fh.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise PpmError(f"truncated PPM payload in {path}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0
