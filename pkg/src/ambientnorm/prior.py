"""Pluggable sources of illumination-robust semantic features.

A provider turns a scene into a four-layer feature pyramid standing in for
the intermediate layers of a large frozen vision encoder.  The synthetic
provider derives features purely from the material-ID map, so they are
identical for any two renderings of the same scene; the RGB patch provider
is the deliberately weak baseline that just downsamples the image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import container
from .tensor import Tensor, _linear_resample_matrix

LAYER_IDS = (6, 12, 18, 24)

# stand-in patch-grid schedule: spatial reduction per encoder layer
LAYER_STRIDES = {6: 4, 12: 8, 18: 16, 24: 16}

DEFAULT_DIM = 32
MAX_MATERIALS = 64


class PriorError(ValueError):
    pass


@dataclass
class SemanticFeatureSet:
    """Ordered per-layer feature maps, each N,D,h,w with shared N and D."""

    layers: list[tuple[int, Tensor]]

    def __post_init__(self):
        if len(self.layers) != 4:
            raise PriorError(f"expected 4 layers, got {len(self.layers)}")
        ids = [lid for lid, _ in self.layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise PriorError(f"layer ids must be strictly increasing, got {ids}")
        n, d = self.layers[0][1].shape[:2]
        for lid, feat in self.layers:
            if feat.ndim != 4:
                raise PriorError(f"layer {lid} feature must be 4-d, got shape {feat.shape}")
            if feat.shape[0] != n or feat.shape[1] != d:
                raise PriorError(
                    f"layer {lid} has N,D={feat.shape[:2]}, expected ({n}, {d})"
                )
            if not np.isfinite(feat.data).all():
                raise PriorError(f"layer {lid} contains non-finite values")

    @property
    def batch(self) -> int:
        return self.layers[0][1].shape[0]

    @property
    def dim(self) -> int:
        return self.layers[0][1].shape[1]

    def layer(self, layer_id: int) -> Tensor:
        for lid, feat in self.layers:
            if lid == layer_id:
                return feat
        raise PriorError(f"feature set has no layer {layer_id}")


def _layer_grid(h: int, w: int, layer_id: int) -> tuple[int, int]:
    s = LAYER_STRIDES[layer_id]
    return max(1, h // s), max(1, w // s)


def _downsample(maps: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resampling of N,D,H,W arrays (no autodiff)."""
    ry = _linear_resample_matrix(maps.shape[2], out_h, maps.dtype)
    rx = _linear_resample_matrix(maps.shape[3], out_w, maps.dtype)
    return np.einsum("oh,ndhw,pw->ndop", ry, maps, rx, optimize=True)


def _as_batched_map(material_map) -> np.ndarray:
    arr = material_map.data if isinstance(material_map, Tensor) else np.asarray(material_map)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise PriorError(f"material map must be 1,H,W or N,1,H,W, got shape {arr.shape}")
    return arr


class SyntheticEncoder:
    """Material-ID driven feature provider, invariant to illumination.

    Each material ID owns a fixed unit-norm embedding drawn once from the
    seed; layers differ by fixed orthogonal channel mixing.  Frozen: nothing
    here is ever trained.
    """

    def __init__(self, seed: int, dim: int = DEFAULT_DIM, max_materials: int = MAX_MATERIALS):
        self.seed = int(seed)
        self.dim = int(dim)
        self.max_materials = int(max_materials)
        rng = np.random.default_rng([int(seed), 0x5EED])
        self.embeddings = self._draw_embeddings(rng)
        self.mixers = {}
        for lid in LAYER_IDS:
            q, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
            self.mixers[lid] = q.astype(np.float32)

    def _draw_embeddings(self, rng) -> np.ndarray:
        # redraw until all pairwise cosines are under 0.9
        for _ in range(64):
            emb = rng.standard_normal((self.max_materials, self.dim))
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
            cos = emb @ emb.T
            np.fill_diagonal(cos, 0.0)
            if np.abs(cos).max() < 0.9:
                return emb.astype(np.float32)
        raise PriorError("could not draw sufficiently distinct material embeddings")

    def encode(self, material_map) -> SemanticFeatureSet:
        ids_f = _as_batched_map(material_map)
        ids = np.rint(ids_f[:, 0]).astype(np.int64)  # N,H,W
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= self.max_materials:
            raise PriorError(
                f"material id out of range [0, {self.max_materials}): "
                f"found {ids.min()}..{ids.max()}"
            )
        n, h, w = ids.shape
        full = self.embeddings[ids]  # N,H,W,D
        full = np.ascontiguousarray(full.transpose(0, 3, 1, 2))  # N,D,H,W
        layers = []
        for lid in LAYER_IDS:
            gh, gw = _layer_grid(h, w, lid)
            down = _downsample(full, gh, gw)
            mixed = np.einsum("ed,ndhw->nehw", self.mixers[lid], down, optimize=True)
            layers.append((lid, Tensor(mixed.astype(np.float32))))
        return SemanticFeatureSet(layers)


def encode_synthetic(material_map, seed: int, dim: int = DEFAULT_DIM) -> SemanticFeatureSet:
    return SyntheticEncoder(seed, dim=dim).encode(material_map)


class RgbPatchEncoder:
    """Weak baseline provider: per-layer features are just the downsampled
    image itself (D = 3), so they drift with illumination."""

    dim = 3

    def encode(self, image) -> SemanticFeatureSet:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise PriorError(f"rgb encoder expects 3,H,W or N,3,H,W, got shape {arr.shape}")
        h, w = arr.shape[2], arr.shape[3]
        layers = []
        for lid in LAYER_IDS:
            gh, gw = _layer_grid(h, w, lid)
            layers.append((lid, Tensor(_downsample(arr, gh, gw).astype(np.float32))))
        return SemanticFeatureSet(layers)


def save_features(path: str | os.PathLike, features: SemanticFeatureSet) -> None:
    table = {f"layer_{lid}": feat.data for lid, feat in features.layers}
    container.write_tensors(path, table)


def load_features(path: str | os.PathLike) -> SemanticFeatureSet:
    """Read a feature container holding layer_6/12/18/24 records.

    Unknown extra records (e.g. exporter metadata) are ignored.  Shape and
    finiteness are validated; errors name the offending layer.
    """
    table = container.read_tensors(path)
    layers = []
    for lid in LAYER_IDS:
        key = f"layer_{lid}"
        if key not in table:
            raise PriorError(f"{path} is missing record '{key}'")
        arr = table[key]
        if arr.ndim != 4:
            raise PriorError(f"record '{key}' must have rank 4, got {arr.ndim}")
        if not np.isfinite(arr).all():
            raise PriorError(f"record '{key}' contains non-finite values")
        layers.append((lid, Tensor(arr.astype(np.float32))))
    return SemanticFeatureSet(layers)
