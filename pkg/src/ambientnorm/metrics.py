"""Restoration fidelity metrics and patch-wise feature consistency.

PSNR and SSIM follow the standard unit-dynamic-range definitions.  SSIM is
built from differentiable tensor ops because it doubles as a training loss
term; PSNR is a plain float metric.

The consistency report compares two feature maps of the same scene (for
example the features of a colored-light rendering against those of its
ambient ground truth): features are average-pooled into patch cells, each
cell pair is scored by cosine similarity, and the report keeps the mean
over all cells plus the mean over the hardest decile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

PSNR_ZERO_MSE_SENTINEL = 99.0


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    Zero MSE returns the 99.0 dB sentinel instead of infinity so report
    aggregation stays finite.
    """
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    b = y.data if isinstance(y, Tensor) else np.asarray(y)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_ZERO_MSE_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(dtype) -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    win = np.outer(g, g)
    win /= win.sum()
    return win.astype(dtype).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def _window_mean(x: Tensor, win: Tensor) -> Tensor:
    # depthwise windowing: fold channels into the batch axis
    n, c, h, w = x.shape
    flat = T.reshape(x, (n * c, 1, h, w))
    zero = Tensor(np.zeros(1, dtype=x.dtype))
    out = T.conv2d(flat, win, zero, stride=1, padding=0)
    oh, ow = out.shape[2], out.shape[3]
    return T.reshape(out, (n, c, oh, ow))


def ssim_tensor(x: Tensor, y: Tensor) -> Tensor:
    """Differentiable single-scale SSIM over valid (unpadded) windows,
    averaged over channels, positions, and batch."""
    if x.shape != y.shape:
        raise ShapeError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x = T.reshape(x, (1, *x.shape))
        y = T.reshape(y, (1, *y.shape))
    if x.ndim != 4:
        raise ShapeError(f"ssim expects 3-d or 4-d input, got shape {x.shape}")
    if x.shape[2] < SSIM_WINDOW or x.shape[3] < SSIM_WINDOW:
        raise ShapeError(
            f"ssim needs spatial size >= {SSIM_WINDOW}, got {x.shape[2]}x{x.shape[3]}"
        )
    win = Tensor(_gaussian_window(x.dtype))

    mu_x = _window_mean(x, win)
    mu_y = _window_mean(y, win)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_x = _window_mean(x * x, win) - mu_xx
    sigma_y = _window_mean(y * y, win) - mu_yy
    sigma_xy = _window_mean(x * y, win) - mu_xy

    num = (mu_xy * 2.0 + SSIM_C1) * (sigma_xy * 2.0 + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return T.reduce_mean(num / den)


def ssim(x, y) -> float:
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    yt = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float32))
    with T.no_grad():
        return ssim_tensor(xt, yt).item()


@dataclass
class ConsistencyReport:
    per_patch_sims: np.ndarray  # row-major cell order, values in [-1, 1]
    mean_sim: float  # serialized as P
    worst_decile_sim: float  # serialized as W
    patch_grid: tuple[int, int]

    def serialize(self) -> str:
        rows, cols = self.patch_grid
        return f"P={self.mean_sim:.6f}\nW={self.worst_decile_sim:.6f}\npatches={rows * cols}\n"

    def heatmap(self) -> np.ndarray:
        """1,rows,cols gray image mapping similarity [-1,1] to [0,1]."""
        rows, cols = self.patch_grid
        grid = self.per_patch_sims.reshape(rows, cols)
        return ((grid + 1.0) * 0.5)[None].astype(np.float32)


def _pool_cells(feat: np.ndarray, patch: int) -> np.ndarray:
    d, h, w = feat.shape
    rows, cols = h // patch, w // patch
    blocks = feat.reshape(d, rows, patch, cols, patch)
    return blocks.mean(axis=(2, 4))  # D,rows,cols


def patch_consistency(feat_a, feat_b, patch: int = 1) -> ConsistencyReport:
    """Cosine similarity between patch-pooled feature vectors.

    ``feat_a`` and ``feat_b`` are D,h,w maps of the same shape; ``patch``
    must divide both spatial extents.
    """
    a = feat_a.data if isinstance(feat_a, Tensor) else np.asarray(feat_a, dtype=np.float64)
    b = feat_b.data if isinstance(feat_b, Tensor) else np.asarray(feat_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"patch_consistency shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ShapeError(f"patch_consistency expects D,h,w features, got shape {a.shape}")
    d, h, w = a.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide feature grid {h}x{w}")

    pa = _pool_cells(a.astype(np.float64), patch)
    pb = _pool_cells(b.astype(np.float64), patch)
    rows, cols = pa.shape[1], pa.shape[2]
    va = pa.reshape(d, -1)
    vb = pb.reshape(d, -1)
    dots = (va * vb).sum(axis=0)
    norms = np.linalg.norm(va, axis=0) * np.linalg.norm(vb, axis=0)
    sims = dots / (norms + 1e-8)

    k = max(1, math.ceil(0.1 * sims.size))
    worst = np.sort(sims)[:k]
    return ConsistencyReport(
        per_patch_sims=sims,
        mean_sim=float(sims.mean()),
        worst_decile_sim=float(worst.mean()),
        patch_grid=(rows, cols),
    )
