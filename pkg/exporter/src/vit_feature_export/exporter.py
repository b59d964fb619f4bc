"""Dump intermediate vision-transformer patch features to .cndt files.

Runs a frozen ViT-style encoder over PPM images, grabs the hidden states of
the requested layers, reshapes the patch tokens back onto their 2-d grid,
and projects the channel width down to the target dimension with a fixed
seeded random matrix.  The projection is drawn once per job, so identical
jobs produce byte-identical outputs.  The exporter is a data producer only:
nothing here is ever trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .ppm import read_ppm

DEFAULT_LAYERS = (6, 12, 18, 24)


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    images: list[Path]
    weights: str
    out_dir: Path
    dim: int = 32
    seed: int = 0
    layers: tuple[int, ...] = DEFAULT_LAYERS
    input_size: int = 224
    suffix: str = ".feat.cndt"
    _model: object = field(default=None, repr=False)


def _load_model(weights: str):
    import torch
    from transformers import AutoModel

    try:
        model = AutoModel.from_pretrained(weights)
    except Exception as exc:
        raise ExportError(f"cannot load model weights from '{weights}': {exc}") from exc
    model.eval()
    torch.set_grad_enabled(False)
    return model


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-d bilinear resampling rows (half-pixel convention)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        if src <= 0:
            m[o, 0] = 1.0
        elif src >= n_in - 1:
            m[o, n_in - 1] = 1.0
        else:
            i0 = int(np.floor(src))
            frac = src - i0
            m[o, i0] = 1.0 - frac
            m[o, i0 + 1] = frac
    return m


def _prepare(image: np.ndarray, size: int) -> np.ndarray:
    """3,H,W in [0,1] -> 1,3,size,size normalized to [-1,1]."""
    _, h, w = image.shape
    ry = _resample_matrix(h, size)
    rx = _resample_matrix(w, size)
    resized = np.matmul(np.matmul(ry, image.astype(np.float64)), rx.T)
    return ((resized - 0.5) / 0.5)[None].astype(np.float32)


def _projection(rng: np.random.Generator, native: int, dim: int) -> np.ndarray:
    # scaled Gaussian projection approximately preserves cosine structure
    return (rng.standard_normal((native, dim)) / np.sqrt(native)).astype(np.float32)


def export_features(job: ExportJob) -> list[Path]:
    """Export one container per image; returns the written paths.

    Raises ExportError for a bad model; per-image read failures raise with
    the offending path named.
    """
    import torch

    if not job.images:
        raise ExportError("no images to export")
    model = job._model if job._model is not None else _load_model(job.weights)
    num_layers = int(model.config.num_hidden_layers)
    if max(job.layers) > num_layers:
        raise ExportError(
            f"model has {num_layers} layers but layer {max(job.layers)} was requested"
        )
    job.out_dir.mkdir(parents=True, exist_ok=True)
    projection = _projection(np.random.default_rng(int(job.seed)), int(model.config.hidden_size), job.dim)

    written = []
    for image_path in job.images:
        try:
            image = read_ppm(image_path)
        except Exception as exc:
            raise ExportError(f"cannot read image '{image_path}': {exc}") from exc
        pixels = torch.from_numpy(_prepare(image, job.input_size))
        outputs = model(pixel_values=pixels, output_hidden_states=True)
        hidden = outputs.hidden_states  # embeddings output first, then one per layer

        patch = int(model.config.patch_size)
        grid = job.input_size // patch
        table: dict[str, np.ndarray] = {}
        for layer_id in job.layers:
            states = hidden[layer_id][0].numpy()  # tokens x native width
            tokens = states[-grid * grid :]  # strip class/register tokens
            feats = tokens @ projection  # grid*grid x dim
            maps = feats.reshape(grid, grid, job.dim).transpose(2, 0, 1)
            if not np.isfinite(maps).all():
                raise ExportError(f"non-finite features for layer {layer_id} of '{image_path}'")
            table[f"layer_{layer_id}"] = maps[None].astype(np.float32)
        table["meta_input_size"] = np.asarray([job.input_size, job.input_size], dtype=np.float32)

        out_path = job.out_dir / (Path(image_path).name.removesuffix(".ppm") + job.suffix)
        container.write_tensors(out_path, table)
        written.append(out_path)
    return written
