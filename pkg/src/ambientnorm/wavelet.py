"""Single-level orthonormal 2-d Haar analysis and synthesis on N,C,H,W maps.

Each channel is transformed independently.  The orthonormal convention
(divisor 2 per 2x2 block) makes the transform energy preserving, so gate
magnitudes downstream stay scale-stable.  Odd extents are handled by
mirroring the trailing row/column before analysis and cropping after
synthesis, which keeps the round trip exact on the original extent.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import ShapeError, Tensor, interleave2, replicate_pad2d


@dataclass
class Subbands:
    """The four half-resolution outputs of one analysis level."""

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    orig_h: int
    orig_w: int

    def as_tuple(self):
        return (self.ll, self.lh, self.hl, self.hh)


def dwt2_haar(x: Tensor) -> Subbands:
    """Decompose into approximation (ll) and vertical/horizontal/diagonal
    detail (lh, hl, hh) per non-overlapping 2x2 block."""
    if x.ndim != 4:
        raise ShapeError(f"dwt2_haar expects a 4-d tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        x = replicate_pad2d(x, bottom=h % 2, right=w % 2)
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    cc = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    ll = (a + b + cc + d) * 0.5
    lh = (a + b - cc - d) * 0.5
    hl = (a - b + cc - d) * 0.5
    hh = (a - b - cc + d) * 0.5
    return Subbands(ll=ll, lh=lh, hl=hl, hh=hh, orig_h=h, orig_w=w)


def idwt2_haar(s: Subbands) -> Tensor:
    """Exact inverse of :func:`dwt2_haar`, cropped to the original extent."""
    shape = s.ll.shape
    for name, t in (("lh", s.lh), ("hl", s.hl), ("hh", s.hh)):
        if t.shape != shape:
            raise ShapeError(f"idwt2_haar subband {name} has shape {t.shape}, expected {shape}")
    a = (s.ll + s.lh + s.hl + s.hh) * 0.5
    b = (s.ll + s.lh - s.hl - s.hh) * 0.5
    c = (s.ll - s.lh + s.hl - s.hh) * 0.5
    d = (s.ll - s.lh - s.hl + s.hh) * 0.5
    full = interleave2(a, b, c, d)
    if full.shape[2] != s.orig_h or full.shape[3] != s.orig_w:
        full = full[:, :, : s.orig_h, : s.orig_w]
    return full
