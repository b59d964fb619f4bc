"""Guided encoder-decoder restoration network with a global residual output.

The backbone is a small U-shaped network.  At every encoder stage the
semantic prior is folded in twice: a softmax gate predicted from the pooled
backbone feature picks a convex mix of the prior's layers (``psf_fuse``),
and the mix is injected through single-head cross attention scaled by a
zero-initialized per-stage factor (``drfb_inject``), so an untrained network
ignores the prior entirely.  On the decoder side each skip connection is
low-frequency-gated in the Haar domain (``sffb_filter``) and each decoded
feature passes through an edge-gated pair of structural/chromatic branches
(``bfacg``).  The final convolution predicts a residual added to the input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from . import container
from . import tensor as T
from .prior import LAYER_IDS, SemanticFeatureSet
from .tensor import ShapeError, Tensor
from .wavelet import Subbands, dwt2_haar, idwt2_haar


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    stages: int = 3
    base_channels: int = 16
    prior_dim: int = 32
    prior_seed: int = 7
    prior_layer_ids: tuple[int, ...] = LAYER_IDS
    edge_gate_init: tuple[float, float] = (1.0, 0.0)
    refiner_enabled: bool = False
    guidance_enabled: bool = True
    # decoder-side color-frequency refinement (edge-gated branches + skip gating)
    refinement_enabled: bool = True

    def validate(self):
        if self.stages < 2:
            raise ModelError(f"stages must be >= 2, got {self.stages}")
        if self.base_channels < 4:
            raise ModelError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.prior_dim < 1:
            raise ModelError(f"prior_dim must be positive, got {self.prior_dim}")

    def channels(self, stage: int) -> int:
        return self.base_channels << stage

    def to_text(self) -> str:
        lines = [
            f"stages = {self.stages}",
            f"base_channels = {self.base_channels}",
            f"prior_dim = {self.prior_dim}",
            f"prior_seed = {self.prior_seed}",
            f"prior_layer_ids = {','.join(str(i) for i in self.prior_layer_ids)}",
            f"edge_gate_init = {self.edge_gate_init[0]},{self.edge_gate_init[1]}",
            f"refiner_enabled = {int(self.refiner_enabled)}",
            f"guidance_enabled = {int(self.guidance_enabled)}",
            f"refinement_enabled = {int(self.refinement_enabled)}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        values: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
        cfg = ModelConfig(
            stages=int(values["stages"]),
            base_channels=int(values["base_channels"]),
            prior_dim=int(values["prior_dim"]),
            prior_seed=int(values["prior_seed"]),
            prior_layer_ids=tuple(int(v) for v in values["prior_layer_ids"].split(",")),
            edge_gate_init=tuple(float(v) for v in values["edge_gate_init"].split(",")),
            refiner_enabled=bool(int(values["refiner_enabled"])),
            guidance_enabled=bool(int(values["guidance_enabled"])),
            refinement_enabled=bool(int(values["refinement_enabled"])),
        )
        cfg.validate()
        return cfg


REFINER_WIDTH = 16


class ModelParams:
    """Named parameter table.  Injection scales start at exactly zero and
    parameter names are unique by construction (dict keys)."""

    def __init__(self, table: dict[str, Tensor]):
        self.table = table

    def __getitem__(self, name: str) -> Tensor:
        return self.table[name]

    def __contains__(self, name: str) -> bool:
        return name in self.table

    def names(self) -> list[str]:
        return list(self.table.keys())

    def trainable(self, include_refiner: bool = True, only_refiner: bool = False) -> list[str]:
        if only_refiner:
            return [n for n in self.table if n.startswith("refiner.")]
        if include_refiner:
            return list(self.table.keys())
        return [n for n in self.table if not n.startswith("refiner.")]

    def zero_grads(self):
        for t in self.table.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.table.items()})


def _he_std(cin: int, k: int) -> float:
    return float(np.sqrt(2.0 / (cin * k * k)))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Build every parameter of the full network with a seeded draw order.

    All parameters exist regardless of the guidance/refinement/refiner
    toggles, so ablation variants share the initialization of their common
    subnetwork.
    """
    config.validate()
    rng = np.random.default_rng([int(seed), 0xA11])
    dt = T.current_dtype()
    table: dict[str, Tensor] = {}

    def conv(name: str, cout: int, cin: int, k: int, scale: float = 1.0):
        std = scale * _he_std(cin, k)
        table[f"{name}.w"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dt), requires_grad=True)
        table[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)

    def dense(name: str, nin: int, nout: int):
        std = float(np.sqrt(2.0 / nin))
        table[f"{name}.w"] = Tensor(rng.normal(0.0, std, (nin, nout)).astype(dt), requires_grad=True)
        table[f"{name}.b"] = Tensor(np.zeros(nout, dtype=dt), requires_grad=True)

    def scalar(name: str, value: float):
        table[name] = Tensor(np.asarray(value, dtype=dt), requires_grad=True)

    conv("stem", config.channels(0), 3, 3)
    for s in range(config.stages):
        c = config.channels(s)
        conv(f"enc{s}.c1", c, c, 3)
        conv(f"enc{s}.c2", c, c, 3)
        # prior fusion: per-layer 1x1 projections plus the layer-selection gate
        for lid in config.prior_layer_ids:
            conv(f"enc{s}.fuse.proj{lid}", c, config.prior_dim, 1)
        dense(f"enc{s}.fuse.gate1", c, max(1, c // 4))
        dense(f"enc{s}.fuse.gate2", max(1, c // 4), len(config.prior_layer_ids))
        # cross-attention injection, zero-initialized residual scale
        conv(f"enc{s}.inject.q", c, c, 1)
        conv(f"enc{s}.inject.k", c, c, 1)
        conv(f"enc{s}.inject.v", c, c, 1)
        scalar(f"enc{s}.inject.scale", 0.0)
        conv(f"down{s}", config.channels(s + 1), c, 3)

    cm = config.channels(config.stages)
    conv("mid.c1", cm, cm, 3)
    conv("mid.c2", cm, cm, 3)

    for s in range(config.stages):
        c = config.channels(s)
        conv(f"up{s}", c, config.channels(s + 1), 3)
        conv(f"dec{s}.c1", c, 2 * c, 3)
        conv(f"dec{s}.c2", c, c, 3)
        conv(f"dec{s}.branch.str1", c, c, 3)
        conv(f"dec{s}.branch.str2", c, c, 3)
        conv(f"dec{s}.branch.chr1", c, c, 3)
        conv(f"dec{s}.branch.chr2", c, c, 3)
        scalar(f"dec{s}.edge.slope", config.edge_gate_init[0])
        scalar(f"dec{s}.edge.bias", config.edge_gate_init[1])
        conv(f"skip{s}.gate", c, c, 3)

    conv("final", 3, config.channels(0), 3, scale=0.1)

    conv("refiner.c1", REFINER_WIDTH, 3, 3)
    conv("refiner.c2", REFINER_WIDTH, REFINER_WIDTH, 3)
    conv("refiner.c3", REFINER_WIDTH, REFINER_WIDTH, 3)
    conv("refiner.c4", 3, REFINER_WIDTH, 3)
    table["refiner.c4.w"].data[:] = 0.0  # start as the identity correction

    return ModelParams(table)


def _conv(x: Tensor, params: ModelParams, name: str, stride: int = 1, padding: int = 1) -> Tensor:
    return T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=padding)


def _conv_block(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    x = T.relu(_conv(x, params, f"{prefix}.c1"))
    return T.relu(_conv(x, params, f"{prefix}.c2"))


def psf_fuse(feat: Tensor, prior: SemanticFeatureSet, params: ModelParams, stage: int,
             layer_ids: Iterable[int] = LAYER_IDS) -> tuple[Tensor, Tensor]:
    """Convex per-sample mix of projected prior layers.

    The gate sees only the pooled backbone feature, so the mixing weights
    are independent of the prior content.  Returns (fused map, weights);
    weights rows lie on the simplex.
    """
    layer_ids = tuple(layer_ids)
    n, c, h, w = feat.shape
    pooled = T.global_avg_pool(feat)
    hidden = T.relu(T.matmul(pooled, params[f"enc{stage}.fuse.gate1.w"]) + params[f"enc{stage}.fuse.gate1.b"])
    logits = T.matmul(hidden, params[f"enc{stage}.fuse.gate2.w"]) + params[f"enc{stage}.fuse.gate2.b"]
    alpha = T.softmax_lastdim(logits)

    fused = None
    for i, lid in enumerate(layer_ids):
        layer_feat = prior.layer(lid)
        resized = T.bilinear_resize(layer_feat, h, w)
        projected = _conv(resized, params, f"enc{stage}.fuse.proj{lid}", padding=0)
        weight = T.reshape(alpha[:, i : i + 1], (n, 1, 1, 1))
        term = projected * weight
        fused = term if fused is None else fused + term
    return fused, alpha


def drfb_inject(feat: Tensor, fused: Tensor, params: ModelParams, stage: int) -> Tensor:
    """Single-head cross attention from backbone queries onto the fused
    prior, added through the zero-initialized per-stage scale."""
    if feat.shape != fused.shape:
        raise ShapeError(f"inject shape mismatch: backbone {feat.shape} vs prior {fused.shape}")
    n, c, h, w = feat.shape
    q = _conv(feat, params, f"enc{stage}.inject.q", padding=0)
    k = _conv(fused, params, f"enc{stage}.inject.k", padding=0)
    v = _conv(fused, params, f"enc{stage}.inject.v", padding=0)

    def tokens(t: Tensor) -> Tensor:
        return T.transpose_last2(T.reshape(t, (n, c, h * w)))  # N,T,C

    scores = T.matmul(tokens(q), T.transpose_last2(tokens(k))) * (1.0 / float(np.sqrt(c)))
    attended = T.matmul(T.softmax_lastdim(scores), tokens(v))
    attended = T.reshape(T.transpose_last2(attended), (n, c, h, w))
    return feat + params[f"enc{stage}.inject.scale"] * attended


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def edge_map(feat: Tensor, slope: Tensor, bias: Tensor) -> Tensor:
    """Soft edge mask in (0,1) from the gradient magnitude of the channel
    mean.  Edge replication keeps constant inputs flat at the borders."""
    mean = T.mean_channels(feat)
    padded = T.replicate_pad2d(mean, 1, 1, 1, 1)
    dt = feat.dtype
    zero = Tensor(np.zeros(1, dtype=dt))
    gx = T.conv2d(padded, Tensor(_SOBEL_X.astype(dt).reshape(1, 1, 3, 3)), zero)
    gy = T.conv2d(padded, Tensor(_SOBEL_Y.astype(dt).reshape(1, 1, 3, 3)), zero)
    magnitude = T.sqrt(gx * gx + gy * gy + 1e-8)
    return T.sigmoid(slope * magnitude + bias)


def bfacg(feat: Tensor, params: ModelParams, stage: int) -> Tensor:
    """Blend a structural and a chromatic branch with the edge mask, so
    boundaries keep the structural path and flat regions the chromatic one."""
    f_str = _conv(T.relu(_conv(feat, params, f"dec{stage}.branch.str1")), params, f"dec{stage}.branch.str2")
    f_chr = _conv(T.relu(_conv(feat, params, f"dec{stage}.branch.chr1")), params, f"dec{stage}.branch.chr2")
    gate = edge_map(feat, params[f"dec{stage}.edge.slope"], params[f"dec{stage}.edge.bias"])
    return gate * f_str + (1.0 - gate) * f_chr


def sffb_filter(skip: Tensor, params: ModelParams, stage: int) -> Tensor:
    """Suppress the low-frequency subband of a skip feature with a learned
    sigmoid gate; detail subbands pass through untouched."""
    bands = dwt2_haar(skip)
    gate = T.sigmoid(_conv(bands.ll, params, f"skip{stage}.gate"))
    filtered = gate * bands.ll
    return idwt2_haar(Subbands(filtered, bands.lh, bands.hl, bands.hh, bands.orig_h, bands.orig_w))


def forward(image: Tensor, prior: SemanticFeatureSet | None, params: ModelParams, config: ModelConfig) -> Tensor:
    """Full restoration forward pass: returns input + predicted residual
    (unclipped; clip at evaluation/inference time)."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"forward expects N,3,H,W input, got shape {image.shape}")
    n, _, h, w = image.shape
    factor = 1 << config.stages
    if h % factor or w % factor:
        raise ShapeError(
            f"spatial size {h}x{w} not divisible by {factor}; pad the input to a multiple of {factor}"
        )
    if config.guidance_enabled:
        if prior is None:
            raise ModelError("guidance is enabled but no prior features were given")
        for lid in config.prior_layer_ids:
            prior.layer(lid)  # raises if missing

    x = T.relu(_conv(image, params, "stem"))
    skips: list[Tensor] = []
    for s in range(config.stages):
        x = _conv_block(x, params, f"enc{s}")
        if config.guidance_enabled:
            fused, _ = psf_fuse(x, prior, params, s, config.prior_layer_ids)
            x = drfb_inject(x, fused, params, s)
        skips.append(x)
        x = T.relu(_conv(x, params, f"down{s}", stride=2))

    x = _conv_block(x, params, "mid")

    for s in reversed(range(config.stages)):
        target = skips[s]
        x = T.bilinear_resize(x, target.shape[2], target.shape[3])
        x = T.relu(_conv(x, params, f"up{s}"))
        skip = sffb_filter(target, params, s) if config.refinement_enabled else target
        x = _conv_block(T.concat_channels([x, skip]), params, f"dec{s}")
        if config.refinement_enabled:
            x = bfacg(x, params, s)

    residual = _conv(x, params, "final")
    return image + residual


def refiner_apply(y: Tensor, params: ModelParams) -> Tensor:
    """Residual correction by a small conv net, clipped to [0, 1]."""
    x = T.relu(_conv(y, params, "refiner.c1"))
    x = T.relu(_conv(x, params, "refiner.c2"))
    x = T.relu(_conv(x, params, "refiner.c3"))
    correction = _conv(x, params, "refiner.c4")
    return T.clip01(y + correction)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    table: dict[str, np.ndarray] = {"config": container.encode_text(config.to_text())}
    for name, t in params.table.items():
        table[name] = t.data
    container.write_tensors(path, table)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    table = container.read_tensors(path)
    if "config" not in table:
        raise ModelError(f"checkpoint {path} has no config record")
    config = ModelConfig.from_text(container.decode_text(table.pop("config")))
    params = ModelParams({name: Tensor(arr, requires_grad=True) for name, arr in table.items()})
    return params, config


def variant_config(config: ModelConfig, variant: str) -> ModelConfig:
    """Ablation arms: 'baseline' (no guidance, no refinement), 'guided'
    (guidance only), 'full' (everything)."""
    if variant == "baseline":
        return replace(config, guidance_enabled=False, refinement_enabled=False)
    if variant == "guided":
        return replace(config, guidance_enabled=True, refinement_enabled=False)
    if variant == "full":
        return replace(config, guidance_enabled=True, refinement_enabled=True)
    raise ModelError(f"unknown variant '{variant}'")
