"""Dense NCHW tensor kernels.

Tensors are plain ``numpy.ndarray`` objects of rank 4 (N, C, H, W), float32
unless a caller deliberately passes float64 (the gradient checks do). All
functions here are pure: they never modify their inputs.

Depth-to-space supports both channel conventions:

* ``CRD`` (column-row-depth, the PyTorch ``pixel_shuffle`` layout): input
  channel ``c * b*b + (i * b + j)`` lands at output channel ``c``, sub-pixel
  ``(i, j)``.
* ``DCR`` (depth-column-row): input channel ``(i * b + j) * C + c``.

CRD is the canonical in-memory layout; DCR only appears in exported models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError

ORDERS = ("CRD", "DCR")

Scale = Union[int, float, Fraction, str]


@dataclass
class Kernel:
    """Convolution weights ``(out_ch, in_ch, kh, kw)`` plus per-output bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4:
            raise DimensionError(f"kernel weight must be rank 4, got shape {self.weight.shape}")
        out_ch, _, kh, kw = self.weight.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise DimensionError(f"kernel spatial size must be 1 or 3, got {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {out_ch} output channels")

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.shape[2]

    def copy(self) -> "Kernel":
        return Kernel(self.weight.copy(), self.bias.copy())

    def astype(self, dtype) -> "Kernel":
        return Kernel(self.weight.astype(dtype), self.bias.astype(dtype))


def check_tensor(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")
    if x.size == 0:
        raise DimensionError(f"{name} is empty: shape {x.shape}")


def _check_order(order: str) -> str:
    order = order.upper()
    if order not in ORDERS:
        raise ParameterError(f"depth-to-space order must be one of {ORDERS}, got {order!r}")
    return order


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape ``(N*H*W, C*k*k)`` for a same-padded k x k window."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x: np.ndarray, kernel: Kernel, accumulate=np.float64) -> np.ndarray:
    """Stride-1 cross-correlation with zero "same" padding.

    Products and sums are carried out in ``accumulate`` precision and the
    result is rounded once to the input dtype. With float32 operands and the
    default float64 accumulator every product is exact, which makes the
    result insensitive to channel ordering for all practical purposes.
    """
    check_tensor(x)
    if x.shape[1] != kernel.in_ch:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {kernel.in_ch}")
    n, _, h, w = x.shape
    cols = im2col(x, kernel.size).astype(accumulate, copy=False)
    wmat = kernel.weight.reshape(kernel.out_ch, -1).astype(accumulate, copy=False)
    acc = cols @ wmat.T
    acc += kernel.bias.astype(accumulate, copy=False)
    out = acc.reshape(n, h, w, kernel.out_ch).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=np.result_type(x.dtype, kernel.weight.dtype))


def relu1(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1]."""
    return np.clip(x, 0.0, 1.0)


def depth_to_space(x: np.ndarray, block: int, order: str = "CRD") -> np.ndarray:
    check_tensor(x)
    order = _check_order(order)
    n, c, h, w = x.shape
    b = int(block)
    if b < 1 or c % (b * b):
        raise DimensionError(f"{c} channels not divisible by block^2 = {b * b}")
    co = c // (b * b)
    if order == "CRD":
        t = x.reshape(n, co, b, b, h, w).transpose(0, 1, 4, 2, 5, 3)
    else:
        t = x.reshape(n, b, b, co, h, w).transpose(0, 3, 4, 1, 5, 2)
    return np.ascontiguousarray(t.reshape(n, co, h * b, w * b))


def space_to_depth(x: np.ndarray, block: int, order: str = "CRD") -> np.ndarray:
    """Inverse of :func:`depth_to_space` for the same ``order``."""
    check_tensor(x)
    order = _check_order(order)
    n, c, h, w = x.shape
    b = int(block)
    if b < 1 or h % b or w % b:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by block {b}")
    t = x.reshape(n, c, h // b, b, w // b, b)
    if order == "CRD":
        t = t.transpose(0, 1, 3, 5, 2, 4)
    else:
        t = t.transpose(0, 3, 5, 1, 2, 4)
    return np.ascontiguousarray(t.reshape(n, c * b * b, h // b, w // b))


def repeat_interleave_channels(x: np.ndarray, repeats: int) -> np.ndarray:
    return np.repeat(x, repeats, axis=1)


def nearest_upscale(x: np.ndarray, s: int) -> np.ndarray:
    check_tensor(x)
    if int(s) != s or s < 1:
        raise ParameterError(f"nearest upscale factor must be a positive integer, got {s}")
    s = int(s)
    return np.repeat(np.repeat(x, s, axis=2), s, axis=3)


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with half-pixel centres.

    Output pixel ``d`` samples input pixel ``floor((d + 0.5) * in / out)``,
    which reduces to pixel replication for integer factors.
    """
    check_tensor(x)
    _, _, h, w = x.shape
    rows = ((2 * np.arange(out_h) + 1) * h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * w) // (2 * out_w)
    return np.ascontiguousarray(x[:, :, rows][:, :, :, cols])


def avg_pool2(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    t = x.reshape(n, c, h // 2, 2, w // 2, 2)
    # fixed summation order keeps the result independent of memory layout
    s = (t[:, :, :, 0, :, 0] + t[:, :, :, 0, :, 1]) + (t[:, :, :, 1, :, 0] + t[:, :, :, 1, :, 1])
    return (s * x.dtype.type(0.25)).astype(x.dtype)


def as_fraction(scale: Scale) -> Fraction:
    if isinstance(scale, Fraction):
        return scale
    if isinstance(scale, str):
        return Fraction(scale)
    if isinstance(scale, float):
        return Fraction(scale).limit_denominator(1000)
    return Fraction(int(scale))


def scaled_size(size: int, scale: Scale) -> int:
    return int(math.floor(size * as_fraction(scale) + Fraction(1, 2)))


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    at2, at3 = at * at, at * at * at
    near = (a + 2) * at3 - (a + 3) * at2 + 1
    far = a * at3 - 5 * a * at2 + 8 * a * at - 4 * a
    return np.where(at <= 1, near, np.where(at < 2, far, 0.0))


def bicubic_weights(in_size: int, out_size: int, scale: float) -> np.ndarray:
    """Row-stochastic ``(out_size, in_size)`` interpolation matrix.

    Half-pixel centres, Keys kernel with a = -0.5, edge samples clamped.
    When shrinking, the kernel is stretched by ``1/scale`` (antialiasing).
    """
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(int)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = _cubic((centers[:, None] - idx) * kscale)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, in_size - 1).ravel()), wts.ravel())
    return mat / mat.sum(axis=1, keepdims=True)


def bicubic_resize(x: np.ndarray, scale: Scale) -> np.ndarray:
    check_tensor(x)
    frac = as_fraction(scale)
    if frac <= 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    _, _, h, w = x.shape
    oh, ow = scaled_size(h, frac), scaled_size(w, frac)
    if oh < 1 or ow < 1:
        raise DimensionError(f"resizing {h}x{w} by {frac} gives an empty image")
    mh = bicubic_weights(h, oh, float(frac))
    mw = bicubic_weights(w, ow, float(frac))
    out = np.einsum("oh,nchw,pw->ncop", mh, x.astype(np.float64), mw, optimize=True)
    return out.astype(x.dtype)
