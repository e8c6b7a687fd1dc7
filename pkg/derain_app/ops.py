"""Differentiable kernels the NLEDN graph is assembled from.

All feature maps are single images laid out C x H x W; there is no batch
axis. Every kernel is a `Function` subclass with an explicit backward pass and
a thin functional wrapper (`conv2d`, `max_pool2d`, ...) that the model calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PoolIndicesError, ShapeError
from .tensor import Function, Tensor, as_tensor

AFFINITY_MODES = ("softmax", "raw-sum")
RAW_SUM_EPS = 1e-6


# --- convolution ---

def _same_padding(kh: int, kw: int) -> Tuple[int, int]:
    return (kh - 1) // 2, (kw - 1) // 2


def _windows(x: np.ndarray, ph: int, pw: int, kh: int, kw: int) -> np.ndarray:
    """im2col as a strided view: (C, H, W, kh, kw) patches of the zero-padded map."""
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(padded, (kh, kw), axis=(1, 2))


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        kh, kw = w.shape[2:]
        self.ph, self.pw = _same_padding(kh, kw)
        self.cols = _windows(x, self.ph, self.pw, kh, kw)
        self.w = w
        out = np.tensordot(w, self.cols, axes=([1, 2, 3], [0, 3, 4]))
        out += b[:, None, None]
        return out

    def backward(self, grad: np.ndarray):
        kh, kw = self.w.shape[2:]
        dw = np.tensordot(grad, self.cols, axes=([1, 2], [1, 2]))
        db = grad.sum(axis=(1, 2))
        # full correlation of the upstream grad with the flipped kernel
        gcols = _windows(grad, self.ph, self.pw, kh, kw)
        flipped = self.w[:, :, ::-1, ::-1]
        dx = np.tensordot(flipped, gcols, axes=([0, 2, 3], [0, 3, 4]))
        return dx, dw, db


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: Optional[int] = None) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding that preserves H x W."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d", "expected input C x H x W and kernel O x I x kH x kW", x.shape, w.shape)
    if w.shape[1] != x.shape[0]:
        raise ShapeError("conv2d", f"kernel expects {w.shape[1]} input channels, input has {x.shape[0]}", w.shape, x.shape)
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "kernel extents must be odd", w.shape)
    if b.shape != (w.shape[0],):
        raise ShapeError("conv2d", "bias must have one entry per output channel", b.shape, w.shape)
    if padding is not None and (padding, padding) != _same_padding(kh, kw):
        raise ShapeError("conv2d", f"padding {padding} does not preserve spatial size", w.shape)
    return Conv2d()(x, w, b)


# --- pooling with indices ---

@dataclass(frozen=True)
class PoolIndices:
    """Flat argmax position (within its channel of the pre-pool map) per pooled cell."""

    indices: np.ndarray
    input_shape: Tuple[int, int, int]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.indices.shape


class MaxPool2d(Function):
    name = "max_pool2d"

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        oh, ow = h // 2, w // 2
        blocks = x.reshape(c, oh, 2, ow, 2).transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, 4)
        # window cells are scanned in row-major order, so argmax keeps the smallest flat index on ties
        local = blocks.argmax(axis=-1)
        rows = 2 * np.arange(oh)[None, :, None] + local // 2
        cols = 2 * np.arange(ow)[None, None, :] + local % 2
        self.input_shape = (c, h, w)
        self.indices = PoolIndices((rows * w + cols).astype(np.int64), (c, h, w))
        return np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray):
        return (_scatter(grad, self.indices.indices, self.input_shape),)


def max_pool2d(x: Tensor) -> Tuple[Tensor, PoolIndices]:
    """2x2 / stride-2 max pooling that records the argmax of every window."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("max_pool2d", "expected C x H x W", x.shape)
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("max_pool2d", "H and W must be even; pad the input before pooling", x.shape)
    fn = MaxPool2d()
    out = fn(x)
    return out, fn.indices


def _scatter(values: np.ndarray, indices: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
    c = shape[0]
    out = np.zeros((c, shape[1] * shape[2]), dtype=values.dtype)
    np.put_along_axis(out, indices.reshape(c, -1), values.reshape(c, -1), axis=1)
    return out.reshape(shape)


class MaxUnpool2d(Function):
    name = "max_unpool2d"

    def __init__(self, indices: PoolIndices):
        self.indices = indices

    def forward(self, x: np.ndarray) -> np.ndarray:
        return _scatter(x, self.indices.indices, self.indices.input_shape)

    def backward(self, grad: np.ndarray):
        c = grad.shape[0]
        flat_idx = self.indices.indices.reshape(c, -1)
        gathered = np.take_along_axis(grad.reshape(c, -1), flat_idx, axis=1)
        return (gathered.reshape(self.indices.shape),)


def max_unpool2d(x: Tensor, indices: PoolIndices) -> Tensor:
    """Scatter pooled values back to their recorded positions; everything else is zero."""
    x = as_tensor(x)
    if tuple(indices.shape) != tuple(x.shape):
        raise ShapeError("max_unpool2d", "indices do not match the input", indices.shape, x.shape)
    c, h, w = indices.input_shape
    idx = indices.indices
    if idx.size and (idx.min() < 0 or idx.max() >= h * w):
        raise PoolIndicesError(f"max_unpool2d: index out of bounds for a {h}x{w} map (corrupt pooling indices)")
    # each pooled cell (r, c) must point into its own window rows 2r..2r+1, cols 2c..2c+1
    oh, ow = idx.shape[1:]
    rows, cols = np.divmod(idx, w)
    if np.any(rows // 2 != np.arange(oh)[None, :, None]) or np.any(cols // 2 != np.arange(ow)[None, None, :]):
        raise PoolIndicesError("max_unpool2d: an index lies outside its own 2x2 window (corrupt pooling indices)")
    return MaxUnpool2d(indices)(x)


# --- bilinear upsampling (the non-index decoder variant) ---

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation weights with half-pixel centres and edge clamping."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


class Bilinear2x(Function):
    name = "upsample_bilinear2x"

    def forward(self, x: np.ndarray) -> np.ndarray:
        _, h, w = x.shape
        self.mh = bilinear_matrix(h, 2 * h, x.dtype)
        self.mw = bilinear_matrix(w, 2 * w, x.dtype)
        return np.einsum("ih,chw,jw->cij", self.mh, x, self.mw)

    def backward(self, grad: np.ndarray):
        return (np.einsum("ih,cij,jw->chw", self.mh, grad, self.mw),)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("upsample_bilinear2x", "expected C x H x W", x.shape)
    return Bilinear2x()(x)


# --- non-local affinity ---

class NonLocal(Function):
    """y_i = sum_j w_ij g(F_j) with w from embedded dot products theta_i . phi_j."""

    name = "nonlocal_affinity_apply"

    def __init__(self, mode: str):
        self.mode = mode

    def forward(self, f: np.ndarray, w_theta: np.ndarray, w_phi: np.ndarray, w_g: np.ndarray) -> np.ndarray:
        c, h, w = f.shape
        x = f.reshape(c, h * w)
        a_t, a_p, a_g = (m[:, :, 0, 0] for m in (w_theta, w_phi, w_g))
        theta, phi, g = a_t @ x, a_p @ x, a_g @ x
        logits = theta.T @ phi
        if self.mode == "softmax":
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            weights = e / e.sum(axis=1, keepdims=True)
        else:
            denom = logits.sum(axis=1, keepdims=True)
            self.guarded = np.abs(denom) < RAW_SUM_EPS
            denom = np.where(self.guarded, np.where(denom < 0, -RAW_SUM_EPS, RAW_SUM_EPS), denom)
            weights = logits / denom
            self.denom = denom
        self.saved = (x, a_t, a_p, a_g, theta, phi, g, logits, weights)
        self.out_shape = (a_g.shape[0], h, w)
        return (g @ weights.T).reshape(self.out_shape)

    def backward(self, grad: np.ndarray):
        x, a_t, a_p, a_g, theta, phi, g, logits, weights = self.saved
        dy = grad.reshape(g.shape)
        dg = dy @ weights
        dweights = dy.T @ g
        if self.mode == "softmax":
            dlogits = weights * (dweights - (dweights * weights).sum(axis=1, keepdims=True))
        else:
            row = (dweights * logits).sum(axis=1, keepdims=True) / self.denom**2
            row = np.where(self.guarded, 0.0, row)
            dlogits = dweights / self.denom - row
        dtheta = phi @ dlogits.T
        dphi = theta @ dlogits
        dx = a_t.T @ dtheta + a_p.T @ dphi + a_g.T @ dg
        c = x.shape[0]
        return (
            dx.reshape((c,) + self.out_shape[1:]),
            (dtheta @ x.T)[:, :, None, None],
            (dphi @ x.T)[:, :, None, None],
            (dg @ x.T)[:, :, None, None],
        )

    def affinity(self) -> np.ndarray:
        """Row-normalised weights of the last forward pass (N x N)."""
        return self.saved[-1]


def nonlocal_affinity_apply(f: Tensor, w_theta: Tensor, w_phi: Tensor, w_g: Tensor, mode: str = "softmax") -> Tensor:
    f, w_theta, w_phi, w_g = (as_tensor(t) for t in (f, w_theta, w_phi, w_g))
    if mode not in AFFINITY_MODES:
        raise ValueError(f"unknown affinity mode {mode!r}; expected one of {AFFINITY_MODES}")
    if f.data.ndim != 3:
        raise ShapeError("nonlocal_affinity_apply", "expected C x H x W", f.shape)
    c = f.shape[0]
    for name, m in (("theta", w_theta), ("phi", w_phi), ("g", w_g)):
        if m.data.ndim != 4 or m.shape[1:] != (c, 1, 1):
            raise ShapeError("nonlocal_affinity_apply", f"{name} embedding must be C' x {c} x 1 x 1", m.shape, f.shape)
    if w_theta.shape != w_phi.shape:
        raise ShapeError("nonlocal_affinity_apply", "theta and phi embeddings differ", w_theta.shape, w_phi.shape)
    return NonLocal(mode)(f, w_theta, w_phi, w_g)


# --- channel / spatial plumbing ---

class Concat(Function):
    name = "concat_channels"

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        self.bounds = np.cumsum([0] + [x.shape[0] for x in xs])
        return np.concatenate(xs, axis=0)

    def backward(self, grad: np.ndarray):
        return tuple(grad[lo:hi] for lo, hi in zip(self.bounds[:-1], self.bounds[1:]))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels", "nothing to concatenate")
    spatial = {t.shape[1:] for t in inputs}
    if len(spatial) != 1 or any(t.data.ndim != 3 for t in inputs):
        raise ShapeError("concat_channels", "spatial extents differ", *(t.shape for t in inputs))
    if len(inputs) == 1:
        return inputs[0]
    return Concat()(*inputs)


class Crop(Function):
    name = "crop"

    def __init__(self, top: int, left: int, height: int, width: int):
        self.box = (top, left, height, width)

    def forward(self, x: np.ndarray) -> np.ndarray:
        top, left, h, w = self.box
        self.in_shape = x.shape
        return x[:, top:top + h, left:left + w].copy()

    def backward(self, grad: np.ndarray):
        top, left, h, w = self.box
        dx = np.zeros(self.in_shape, dtype=grad.dtype)
        dx[:, top:top + h, left:left + w] = grad
        return (dx,)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    x = as_tensor(x)
    _, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError("crop", f"box ({top}, {left}, {height}, {width}) outside the map", x.shape)
    return Crop(top, left, height, width)(x)


class Tile(Function):
    """Inverse of a k x k crop partition: places row-major tiles back into one map."""

    name = "tile"

    def __init__(self, k: int):
        self.k = k

    def forward(self, *tiles: np.ndarray) -> np.ndarray:
        k = self.k
        rows = [np.concatenate(tiles[r * k:(r + 1) * k], axis=2) for r in range(k)]
        self.tile_shape = tiles[0].shape
        return np.concatenate(rows, axis=1)

    def backward(self, grad: np.ndarray):
        _, th, tw = self.tile_shape
        k = self.k
        return tuple(grad[:, r * th:(r + 1) * th, c * tw:(c + 1) * tw] for r in range(k) for c in range(k))


def tile(tiles: Sequence[Tensor], k: int) -> Tensor:
    tiles = [as_tensor(t) for t in tiles]
    if len(tiles) != k * k:
        raise ShapeError("tile", f"expected {k * k} tiles, got {len(tiles)}")
    if len({t.shape for t in tiles}) != 1:
        raise ShapeError("tile", "tiles differ in shape", *(t.shape for t in tiles))
    if k == 1:
        return tiles[0]
    return Tile(k)(*tiles)


# --- elementwise ---

class Relu(Function):
    name = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray):
        return (grad * self.mask,)


class Tanh(Function):
    name = "tanh"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad: np.ndarray):
        return (grad * (1.0 - self.out**2),)


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    def backward(self, grad: np.ndarray):
        return grad, grad


class Scale(Function):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = factor

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x * x.dtype.type(self.factor)

    def backward(self, grad: np.ndarray):
        return (grad * grad.dtype.type(self.factor),)


class Clamp(Function):
    name = "clamp"

    def __init__(self, lo: float, hi: float):
        self.lo, self.hi = lo, hi

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.inside = (x >= self.lo) & (x <= self.hi)
        return np.clip(x, self.lo, self.hi)

    def backward(self, grad: np.ndarray):
        return (grad * self.inside,)


class WeightedSum(Function):
    """sum(x * weights) for a constant weight array; sum_all uses all-ones."""

    name = "weighted_sum"

    def __init__(self, weights: Optional[np.ndarray] = None):
        self.weights = weights

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.in_shape = x.shape
        self.in_dtype = x.dtype
        total = x.sum() if self.weights is None else (x * self.weights).sum()
        return np.asarray(total, dtype=x.dtype)

    def backward(self, grad: np.ndarray):
        if self.weights is None:
            return (np.full(self.in_shape, grad, dtype=self.in_dtype),)
        return ((grad * self.weights).astype(self.in_dtype, copy=False),)


def relu(x: Tensor) -> Tensor:
    return Relu()(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh()(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", "operands differ in shape", a.shape, b.shape)
    return Add()(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale(factor)(x)


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    return Clamp(lo, hi)(x)


def sum_all(x: Tensor) -> Tensor:
    return WeightedSum()(x)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    x = as_tensor(x)
    if weights.shape != x.shape:
        raise ShapeError("weighted_sum", "weights must match the input", weights.shape, x.shape)
    return WeightedSum(weights)(x)


__all__: List[str] = [
    "PoolIndices",
    "AFFINITY_MODES",
    "add",
    "bilinear_matrix",
    "clamp",
    "concat_channels",
    "conv2d",
    "crop",
    "max_pool2d",
    "max_unpool2d",
    "nonlocal_affinity_apply",
    "relu",
    "scale",
    "sum_all",
    "tanh",
    "tile",
    "upsample_bilinear2x",
    "weighted_sum",
]
