"""Dense float tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major layout (images are N,C,H,W).  Every
differentiable operation appends a node to a thread-local tape; ``backward``
replays the tape in reverse execution order and accumulates gradients into
every reachable tensor that has ``requires_grad`` set.

The default element type is float32.  Gradient checking against central
finite differences needs more headroom than float32 offers, so the suite in
``gradchecks`` temporarily switches the default to float64 via
``default_dtype``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dim."""


class NonFiniteError(ValueError):
    """A value that must be finite is NaN or infinite."""


class _State(threading.local):
    def __init__(self):
        self.tape: list[_Node] = []
        self.recording = True
        self.dtype = np.float32


_STATE = _State()


def _dtype():
    return _STATE.dtype


def current_dtype():
    """The element type newly created tensors default to."""
    return _STATE.dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily change the element type for newly created tensors."""
    prev = _STATE.dtype
    _STATE.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE.dtype = prev


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / data plumbing)."""
    prev = _STATE.recording
    _STATE.recording = False
    try:
        yield
    finally:
        _STATE.recording = prev


def clear_tape():
    """Drop every recorded node.  Call once per optimizer step."""
    _STATE.tape.clear()


def tape_size() -> int:
    return len(_STATE.tape)


class _Node:
    """One executed differentiable op: output, inputs, and a grad rule.

    ``grad_fn(out_grad)`` returns one gradient array (or None) per input.
    """

    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """N-dimensional float array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return slice_view(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype()))


def _record(out: Tensor, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    if _STATE.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _STATE.tape.append(_Node(out, tuple(inputs), grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _record(out, (a, b), grad_fn)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    root = np.sqrt(a.data)
    out = Tensor(root)
    return _record(out, (a,), lambda g: (g * (0.5 / root),))


def absolute(a: Tensor) -> Tensor:
    # Subgradient 0 at the kink.
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (y * (1.0 - y)),))


def clip01(a: Tensor) -> Tensor:
    """Clamp to [0, 1]; the gradient passes through inside the range and is
    zero outside (boundary values count as inside)."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, 0.0, 1.0))
    mask = (a.data >= 0.0) & (a.data <= 1.0)
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose_last2(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def slice_view(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter-add."""
    a = as_tensor(a)
    out = Tensor(a.data[key].copy())

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _record(out, (a,), grad_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate N,C,H,W tensors along the channel axis."""
    parts = [as_tensor(p) for p in parts]
    base = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if p.ndim != 4 or p.shape[0] != base.shape[0] or p.shape[2:] != base.shape[2:]:
            raise ShapeError(
                f"concat_channels operand {i} has shape {p.shape}, expected "
                f"N={base.shape[0]} and spatial {base.shape[2:]}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def grad_fn(g):
        grads = []
        start = 0
        for w in widths:
            grads.append(g[:, start : start + w])
            start += w
        return tuple(grads)

    return _record(out, tuple(parts), grad_fn)


def interleave2(a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """Weave four H,W grids into a 2H,2W grid: a top-left, b top-right,
    c bottom-left, d bottom-right of each 2x2 block."""
    a, b, c, d = as_tensor(a), as_tensor(b), as_tensor(c), as_tensor(d)
    for name, t in (("b", b), ("c", c), ("d", d)):
        if t.shape != a.shape:
            raise ShapeError(f"interleave2 operand {name} has shape {t.shape}, expected {a.shape}")
    n, ch, h, w = a.shape
    out_data = np.empty((n, ch, 2 * h, 2 * w), dtype=a.dtype)
    out_data[:, :, 0::2, 0::2] = a.data
    out_data[:, :, 0::2, 1::2] = b.data
    out_data[:, :, 1::2, 0::2] = c.data
    out_data[:, :, 1::2, 1::2] = d.data
    out = Tensor(out_data)

    def grad_fn(g):
        return (
            g[:, :, 0::2, 0::2],
            g[:, :, 0::2, 1::2],
            g[:, :, 1::2, 0::2],
            g[:, :, 1::2, 1::2],
        )

    return _record(out, (a, b, c, d), grad_fn)


def replicate_pad2d(a: Tensor, top: int = 0, bottom: int = 0, left: int = 0, right: int = 0) -> Tensor:
    """Pad the two trailing axes by repeating the edge rows/columns."""
    a = as_tensor(a)
    pad = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    out = Tensor(np.pad(a.data, pad, mode="edge"))
    h, w = a.shape[-2], a.shape[-1]

    def grad_fn(g):
        ga = g[..., top : top + h, left : left + w].copy()
        if top:
            ga[..., 0, :] += g[..., :top, left : left + w].sum(axis=-2)
        if bottom:
            ga[..., -1, :] += g[..., top + h :, left : left + w].sum(axis=-2)
        if left:
            ga[..., :, 0] += g[..., top : top + h, :left].sum(axis=-1)
        if right:
            ga[..., :, -1] += g[..., top : top + h, left + w :].sum(axis=-1)
        # corner blocks fold into the corner pixels
        if top and left:
            ga[..., 0, 0] += g[..., :top, :left].sum(axis=(-1, -2))
        if top and right:
            ga[..., 0, -1] += g[..., :top, left + w :].sum(axis=(-1, -2))
        if bottom and left:
            ga[..., -1, 0] += g[..., top + h :, :left].sum(axis=(-1, -2))
        if bottom and right:
            ga[..., -1, -1] += g[..., top + h :, left + w :].sum(axis=(-1, -2))
        return (ga,)

    return _record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),))


def reduce_mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))
    scale = 1.0 / a.size

    def grad_fn(g):
        return (np.full(a.shape, float(g) * scale, dtype=a.dtype),)

    return _record(out, (a,), grad_fn)


def mean_channels(a: Tensor) -> Tensor:
    """N,C,H,W -> N,1,H,W channel mean."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"mean_channels expects a 4-d tensor, got shape {a.shape}")
    out = Tensor(a.data.mean(axis=1, keepdims=True))
    scale = 1.0 / a.shape[1]

    def grad_fn(g):
        return (np.broadcast_to(g * scale, a.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), grad_fn)


def global_avg_pool(a: Tensor) -> Tensor:
    """N,C,H,W -> N,C spatial mean; the gradient is 1/(H*W) broadcast back."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d tensor, got shape {a.shape}")
    n, c, h, w = a.shape
    out = Tensor(a.data.mean(axis=(2, 3)))
    scale = 1.0 / (h * w)

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, a.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-d operands or batched 3-d operands with equal
    leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), grad_fn)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    a = as_tensor(a)
    if a.shape[-1] < 1:
        raise ShapeError("softmax_lastdim needs a non-empty last dimension")
    if not np.isfinite(a.data).all():
        raise NonFiniteError("softmax_lastdim input contains NaN or Inf")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    x: N,Cin,H,W; weight: Cout,Cin,kh,kw; bias: Cout.  Output spatial size is
    (H + 2*padding - kh) // stride + 1.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if stride < 1:
        raise ValueError(f"conv2d stride must be positive, got {stride}")
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has Cin={cin}, weight expects Cin={wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match Cout={cout}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty: H'={oh}, W'={ow}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # N,Cin,OH,OW,kh,kw
    # im2col so both passes run as BLAS matmuls
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_data = cols @ wmat.T
    out_data += bias.data[None, :]
    out = Tensor(np.ascontiguousarray(out_data.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)))

    def grad_fn(g):
        g_cols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gw = (g_cols.T @ cols).reshape(cout, cin, kh, kw).astype(weight.dtype, copy=False)
        gb = g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False)
        dcols = (g_cols @ wmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        # fold each kernel tap back onto the padded input
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx.astype(x.dtype, copy=False), gw, gb)

    return _record(out, (x, weight, bias), grad_fn)


def _linear_resample_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic matrix realizing 1-d bilinear resampling with the
    half-pixel (align-corners-false) convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
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


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation to (out_h, out_w), align-corners-false."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects a 4-d tensor, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target must be >= 1, got ({out_h}, {out_w})")
    n, c, h, w = x.shape
    ry = _linear_resample_matrix(h, out_h, x.dtype)
    rx = _linear_resample_matrix(w, out_w, x.dtype)
    out_data = np.matmul(np.matmul(ry, x.data), rx.T)
    out = Tensor(out_data.astype(x.dtype, copy=False))

    def grad_fn(g):
        gx = np.matmul(np.matmul(ry.T, g), rx)
        return (gx.astype(x.dtype, copy=False),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``.  Repeated calls accumulate additively."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _STATE.tape
    if not tape:
        raise RuntimeError("backward called with an empty tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.grad_fn(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = gt
                holders[key] = t

    for key, t in holders.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = grads[key].astype(t.dtype, copy=True)
        else:
            t.grad = t.grad + grads[key].astype(t.dtype, copy=False)


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar-valued tensor function.

    Perturbs every element of ``x`` in turn, so cost is 2*x.size forward
    evaluations; keep probe tensors small.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        probe = f(Tensor(base))
        if probe.size != 1:
            raise ShapeError(f"finite_difference_gradient needs a scalar function, got shape {probe.shape}")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(base.reshape(x.shape))).item()
            flat[i] = orig - eps
            lo = f(Tensor(base.reshape(x.shape))).item()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


def gradcheck_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute deviation normalized by the largest gradient magnitude."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
