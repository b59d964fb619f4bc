"""Finite-difference verification of every differentiable operation.

Each check builds a small random problem, reduces the op under test to a
scalar through a fixed random weighting, and compares the tape gradient
against :func:`finite_difference_gradient`.  Checks run in float64: the
difference quotient divides float rounding noise by 2*eps, which makes a
1e-3 relative target unreachable in float32 even for exactly linear ops,
while production code stays float32 throughout.

Probe inputs avoid kinks (relu/abs at zero, clip at its bounds) by keeping
a margin wider than the probe epsilon around them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics, model, tensor as T, training, wavelet
from .prior import SemanticFeatureSet
from .tensor import Tensor, backward, clear_tape, finite_difference_gradient, gradcheck_rel_error

PER_OP_TOL = 1e-3
END_TO_END_TOL = 1e-2


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _scalar_head(out: Tensor, rng) -> tuple[Tensor, np.ndarray]:
    weights = rng.standard_normal(out.shape)
    return T.reduce_sum(out * Tensor(weights)), weights


def _check_inputs(fn: Callable[..., Tensor], inputs: list[Tensor], rng, eps: float = 1e-3) -> float:
    """Gradcheck ``fn`` w.r.t. every tensor in ``inputs``; returns the worst
    normalized error across them."""
    clear_tape()
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    head_rng = np.random.default_rng(12345)
    head, weights = _scalar_head(out, head_rng)
    backward(head)
    worst = 0.0
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def f(probe: Tensor, idx=i) -> Tensor:
            args = [Tensor(x.data) for x in inputs]
            args[idx] = probe
            return T.reduce_sum(fn(*args) * Tensor(weights))

        numeric = finite_difference_gradient(f, Tensor(t.data.copy()), eps=eps)
        worst = max(worst, gradcheck_rel_error(analytic, numeric))
    clear_tape()
    return worst


def _margin(arr: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values away from zero so kinked ops stay locally smooth."""
    return arr + np.sign(arr) * margin + (arr == 0) * margin


# ---------------------------------------------------------------------------
# individual checks (all run under float64)
# ---------------------------------------------------------------------------


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    b = Tensor(rng.standard_normal(4) * 0.1)
    return _check_inputs(lambda a, ww, bb: T.conv2d(a, ww, bb, stride=1, padding=1), [x, w, b], rng)


def check_conv2d_strided(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 2, 7, 7)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b = Tensor(rng.standard_normal(3) * 0.1)
    return _check_inputs(lambda a, ww, bb: T.conv2d(a, ww, bb, stride=2, padding=1), [x, w, b], rng)


def check_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 5)) * 2.0)
    return _check_inputs(T.softmax_lastdim, [x], rng)


def check_resize(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 3, 5, 4)))
    return _check_inputs(lambda a: T.bilinear_resize(a, 7, 9), [x], rng)


def check_resize_down(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 2, 8, 8)))
    return _check_inputs(lambda a: T.bilinear_resize(a, 3, 5), [x], rng)


def check_pooling(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))
    return _check_inputs(T.global_avg_pool, [x], rng)


def check_sigmoid(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 4, 4)) * 3.0)
    return _check_inputs(T.sigmoid, [x], rng)


def check_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(_margin(rng.standard_normal((2, 3, 4, 4))))
    return _check_inputs(T.relu, [x], rng)


def check_elementwise(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(_margin(rng.standard_normal((3, 4)), 0.3))
    return _check_inputs(lambda x, y: (x * y + x - y) / (y * y + 1.0), [a, b], rng)


def check_matmul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3, 4)))
    b = Tensor(rng.standard_normal((2, 4, 5)))
    return _check_inputs(T.matmul, [a, b], rng)


def check_dwt(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    return _check_inputs(lambda a: T.concat_channels(list(wavelet.dwt2_haar(a).as_tuple())), [x], rng)


def check_dwt_odd(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 2, 5, 7)))
    return _check_inputs(lambda a: T.concat_channels(list(wavelet.dwt2_haar(a).as_tuple())), [x], rng)


def check_idwt(seed: int) -> float:
    rng = np.random.default_rng(seed)
    bands = [Tensor(rng.standard_normal((1, 2, 3, 3))) for _ in range(4)]

    def fn(ll, lh, hl, hh):
        return wavelet.idwt2_haar(wavelet.Subbands(ll, lh, hl, hh, 6, 6))

    return _check_inputs(fn, bands, rng)


def check_clip(seed: int) -> float:
    rng = np.random.default_rng(seed)
    # interior values only: the clip kink is not differentiable
    x = Tensor(rng.uniform(0.05, 0.95, (2, 3, 4, 4)))
    return _check_inputs(T.clip01, [x], rng)


def check_edge_map(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 3, 6, 6)))
    slope = Tensor(np.asarray(1.2))
    bias = Tensor(np.asarray(-0.3))
    return _check_inputs(model.edge_map, [x, slope, bias], rng)


def _tiny_model_setup(seed: int, stages: int = 2, base: int = 4, prior_dim: int = 6):
    cfg = model.ModelConfig(stages=stages, base_channels=base, prior_dim=prior_dim, prior_seed=seed)
    params = model.init_params(cfg, seed)
    return cfg, params


def _random_prior(rng, n: int, dim: int, h: int, w: int) -> SemanticFeatureSet:
    layers = []
    for lid in (6, 12, 18, 24):
        layers.append((lid, Tensor(rng.standard_normal((n, dim, max(1, h // 2), max(1, w // 2))))))
    return SemanticFeatureSet(layers)


def check_psf_fuse(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg, params = _tiny_model_setup(seed)
    feat = Tensor(rng.standard_normal((1, 4, 4, 4)))
    prior = _random_prior(rng, 1, cfg.prior_dim, 4, 4)
    names = ["enc0.fuse.gate1.w", "enc0.fuse.gate2.w", "enc0.fuse.proj6.w", "enc0.fuse.proj24.w"]
    tensors = [feat] + [params[n] for n in names]

    def fn(f, g1, g2, p6, p24):
        local = model.ModelParams(dict(params.table))
        local.table["enc0.fuse.gate1.w"] = g1
        local.table["enc0.fuse.gate2.w"] = g2
        local.table["enc0.fuse.proj6.w"] = p6
        local.table["enc0.fuse.proj24.w"] = p24
        fused, _ = model.psf_fuse(f, prior, local, 0)
        return fused

    return _check_inputs(fn, tensors, rng, eps=1e-6)


def check_drfb_inject(seed: int) -> float:
    rng = np.random.default_rng(seed)
    _, params = _tiny_model_setup(seed)
    feat = Tensor(rng.standard_normal((1, 4, 2, 2)))
    fused = Tensor(rng.standard_normal((1, 4, 2, 2)))
    params.table["enc0.inject.scale"] = Tensor(np.asarray(0.7))
    names = ["enc0.inject.q.w", "enc0.inject.k.w", "enc0.inject.v.w", "enc0.inject.scale"]
    tensors = [feat, fused] + [params[n] for n in names]

    def fn(f, s, qw, kw, vw, scale):
        local = model.ModelParams(dict(params.table))
        local.table["enc0.inject.q.w"] = qw
        local.table["enc0.inject.k.w"] = kw
        local.table["enc0.inject.v.w"] = vw
        local.table["enc0.inject.scale"] = scale
        return model.drfb_inject(f, s, local, 0)

    return _check_inputs(fn, tensors, rng)


def check_bfacg(seed: int) -> float:
    rng = np.random.default_rng(seed)
    _, params = _tiny_model_setup(seed)
    feat = Tensor(rng.standard_normal((1, 4, 5, 5)))
    names = ["dec0.branch.str1.w", "dec0.branch.chr2.w", "dec0.edge.slope", "dec0.edge.bias"]
    tensors = [feat] + [params[n] for n in names]

    def fn(f, s1, c2, slope, bias):
        local = model.ModelParams(dict(params.table))
        local.table["dec0.branch.str1.w"] = s1
        local.table["dec0.branch.chr2.w"] = c2
        local.table["dec0.edge.slope"] = slope
        local.table["dec0.edge.bias"] = bias
        return model.bfacg(f, local, 0)

    # tight probe: the branch relus sit mid-graph, so a wide step can cross
    # an activation kink where the difference quotient is meaningless
    return _check_inputs(fn, tensors, rng, eps=1e-6)


def check_sffb_filter(seed: int) -> float:
    rng = np.random.default_rng(seed)
    _, params = _tiny_model_setup(seed)
    feat = Tensor(rng.standard_normal((1, 4, 6, 6)))
    tensors = [feat, params["skip0.gate.w"], params["skip0.gate.b"]]

    def fn(f, gw, gb):
        local = model.ModelParams(dict(params.table))
        local.table["skip0.gate.w"] = gw
        local.table["skip0.gate.b"] = gb
        return model.sffb_filter(f, local, 0)

    return _check_inputs(fn, tensors, rng)


def check_ssim(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.1, 0.9, (1, 3, 12, 12)))
    y = Tensor(rng.uniform(0.1, 0.9, (1, 3, 12, 12)))
    return _check_inputs(metrics.ssim_tensor, [x, y], rng)


def check_loss(seed: int) -> float:
    rng = np.random.default_rng(seed)
    gt = Tensor(rng.uniform(0.2, 0.8, (1, 3, 12, 12)))
    # keep |y - gt| well away from the L1 kink relative to the probe epsilon
    signs = np.where(rng.standard_normal((1, 3, 12, 12)) >= 0, 1.0, -1.0)
    y = Tensor(gt.data + signs * rng.uniform(0.05, 0.15, (1, 3, 12, 12)))
    return _check_inputs(lambda a, b: training.loss(a, b), [y, gt], rng)


def check_end_to_end(seed: int, sample_fraction: float = 0.01) -> float:
    """L1 loss through the whole network, probed on a parameter sample.

    The target sits a fixed signed offset away from the untouched network
    output, so small parameter probes never cross the L1 kink.
    """
    rng = np.random.default_rng(seed)
    cfg, params = _tiny_model_setup(seed, stages=2, base=4, prior_dim=6)
    image = Tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
    prior = _random_prior(rng, 1, cfg.prior_dim, 16, 16)
    # move the injection scales off zero so guidance parameters are live,
    # and jitter the zero-init biases so no relu pre-activation sits exactly
    # on its kink (dead zero regions otherwise do)
    for s in range(cfg.stages):
        params.table[f"enc{s}.inject.scale"] = Tensor(
            np.asarray(0.3), requires_grad=True
        )
    for name, p in params.table.items():
        if name.endswith(".b"):
            jitter = rng.uniform(0.02, 0.08, p.shape) * np.where(rng.standard_normal(p.shape) >= 0, 1.0, -1.0)
            p.data = p.data + jitter
    with T.no_grad():
        base = model.forward(image, prior, params, cfg).data
    signs = np.where(rng.standard_normal(base.shape) >= 0, 1.0, -1.0)
    gt = Tensor(base - signs * rng.uniform(0.1, 0.3, base.shape))

    def run() -> Tensor:
        y = model.forward(image, prior, params, cfg)
        return T.reduce_mean(T.absolute(y - gt))

    clear_tape()
    for t in params.table.values():
        t.requires_grad = True
        t.grad = None
    backward(run())

    entries = []
    for name in sorted(params.table.keys()):
        if name.startswith("refiner."):
            continue  # not reached by this forward pass
        n = params.table[name].size
        for i in range(n):
            entries.append((name, i))
    count = max(20, int(sample_fraction * len(entries)))
    picks = rng.choice(len(entries), size=min(count, len(entries)), replace=False)

    # smaller probe than the per-op checks: float64 keeps the quotient clean
    # and a tight probe rarely flips any internal relu activation
    eps = 1e-5
    analytic, numeric = [], []
    with T.no_grad():
        for k in picks:
            name, i = entries[int(k)]
            p = params.table[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            analytic.append(float(g.reshape(-1)[i]))
            orig = p.data.reshape(-1)[i]
            p.data.reshape(-1)[i] = orig + eps
            hi = run().item()
            p.data.reshape(-1)[i] = orig - eps
            lo = run().item()
            p.data.reshape(-1)[i] = orig
            numeric.append((hi - lo) / (2 * eps))
    clear_tape()
    return gradcheck_rel_error(np.asarray(analytic), np.asarray(numeric))


CHECKS: dict[str, tuple[Callable[[int], float], float]] = {
    "conv2d": (check_conv2d, PER_OP_TOL),
    "conv2d_strided": (check_conv2d_strided, PER_OP_TOL),
    "softmax_lastdim": (check_softmax, PER_OP_TOL),
    "bilinear_resize_up": (check_resize, PER_OP_TOL),
    "bilinear_resize_down": (check_resize_down, PER_OP_TOL),
    "global_avg_pool": (check_pooling, PER_OP_TOL),
    "sigmoid": (check_sigmoid, PER_OP_TOL),
    "relu": (check_relu, PER_OP_TOL),
    "elementwise": (check_elementwise, PER_OP_TOL),
    "matmul": (check_matmul, PER_OP_TOL),
    "clip01": (check_clip, PER_OP_TOL),
    "dwt2_haar": (check_dwt, PER_OP_TOL),
    "dwt2_haar_odd": (check_dwt_odd, PER_OP_TOL),
    "idwt2_haar": (check_idwt, PER_OP_TOL),
    "edge_map": (check_edge_map, PER_OP_TOL),
    "psf_fuse": (check_psf_fuse, PER_OP_TOL),
    "drfb_inject": (check_drfb_inject, PER_OP_TOL),
    "bfacg": (check_bfacg, PER_OP_TOL),
    "sffb_filter": (check_sffb_filter, PER_OP_TOL),
    "ssim": (check_ssim, PER_OP_TOL),
    "loss": (check_loss, PER_OP_TOL),
    "end_to_end": (check_end_to_end, END_TO_END_TOL),
}

DEFAULT_SEEDS = 20


def run_suite(only: str | None = None, seeds: int | None = None) -> list[CheckResult]:
    results = []
    n_seeds = seeds if seeds is not None else DEFAULT_SEEDS
    with T.default_dtype(np.float64):
        for name, (fn, tol) in CHECKS.items():
            if only and only not in name:
                continue
            worst = 0.0
            for seed in range(n_seeds):
                worst = max(worst, fn(seed))
            results.append(CheckResult(name=name, max_rel_error=worst, tolerance=tol))
    return results
