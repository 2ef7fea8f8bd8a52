"""Dense NCHW kernels: dilated convolution, 2x2 max-pooling, ReLU, bilinear resize.

Tensors are plain numpy arrays of shape (batch, channels, height, width).
Production code runs in float32; every kernel preserves the dtype it is
given, so the same functions serve float64 gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DTYPE = np.float32


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate (and optionally cast) an NCHW array."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4:
        raise ValueError(f"expected a rank-4 (N, C, H, W) array, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"all tensor dimensions must be >= 1, got {x.shape}")
    return x


def effective_kernel_size(k: int, r: int) -> int:
    """Extent covered by a k-tap kernel whose taps are r pixels apart."""
    if k < 1 or r < 1:
        raise ValueError("kernel size and dilation rate must be >= 1")
    return k + (k - 1) * (r - 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    padding: Optional[int] = None  # None selects the size-preserving padding

    def __post_init__(self):
        if self.kernel_size < 1 or self.dilation < 1:
            raise ValueError("kernel_size and dilation must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.padding is None:
            span = self.dilation * (self.kernel_size - 1)
            if span % 2:
                raise ValueError(
                    f"no size-preserving padding for k={self.kernel_size}, r={self.dilation}")
            object.__setattr__(self, "padding", span // 2)
        elif self.padding < 0:
            raise ValueError("padding must be >= 0")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        span = self.dilation * (self.kernel_size - 1)
        h_out = h + 2 * self.padding - span
        w_out = w + 2 * self.padding - span
        if h_out <= 0 or w_out <= 0:
            raise ValueError(
                f"kernel extent {span + 1} exceeds padded input {h + 2 * self.padding}x{w + 2 * self.padding}")
        return h_out, w_out


@dataclass
class ConvWeights:
    kernel: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)

    @classmethod
    def zeros(cls, spec: ConvSpec, dtype=DTYPE) -> "ConvWeights":
        k = spec.kernel_size
        return cls(np.zeros((spec.out_channels, spec.in_channels, k, k), dtype=dtype),
                   np.zeros(spec.out_channels, dtype=dtype))

    def check(self, spec: ConvSpec):
        k = spec.kernel_size
        expected = (spec.out_channels, spec.in_channels, k, k)
        if self.kernel.shape != expected:
            raise ValueError(f"kernel shape {self.kernel.shape} does not match spec {expected}")
        if self.bias.shape != (spec.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {spec.out_channels} outputs")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, spec: ConvSpec, weights: ConvWeights) -> np.ndarray:
    """Stride-1 dilated cross-correlation with zero padding, plus bias.

    Each tap (i, j) reads the input at offset (r*i, r*j) from the output
    position, so the loop is k*k matrix products over the channel axis.
    """
    x = as_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    weights.check(spec)
    k, r = spec.kernel_size, spec.dilation
    h_out, w_out = spec.output_size(x.shape[2], x.shape[3])
    xp = _pad_hw(x, spec.padding)
    dtype = np.result_type(x.dtype, weights.kernel.dtype)

    # accumulate as (O, N, H, W) so tensordot output needs no transpose per tap
    acc = np.zeros((spec.out_channels, x.shape[0], h_out, w_out), dtype=dtype)
    for i in range(k):
        for j in range(k):
            window = xp[:, :, r * i:r * i + h_out, r * j:r * j + w_out]
            acc += np.tensordot(weights.kernel[:, :, i, j], window, axes=([1], [1]))
    acc += weights.bias.astype(dtype)[:, None, None, None]
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def conv2d_backward(x: np.ndarray, spec: ConvSpec, weights: ConvWeights,
                    grad_output: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. (input, kernel, bias)."""
    x = as_tensor4(x)
    weights.check(spec)
    k, r, p = spec.kernel_size, spec.dilation, spec.padding
    h_out, w_out = spec.output_size(x.shape[2], x.shape[3])
    expected = (x.shape[0], spec.out_channels, h_out, w_out)
    grad_output = np.asarray(grad_output)
    if grad_output.shape != expected:
        raise ValueError(f"grad_output shape {grad_output.shape} != forward output shape {expected}")

    xp = _pad_hw(x, p)
    dtype = np.result_type(x.dtype, weights.kernel.dtype, grad_output.dtype)
    grad_xp = np.zeros(xp.shape, dtype=dtype)
    grad_kernel = np.zeros(weights.kernel.shape, dtype=dtype)
    for i in range(k):
        for j in range(k):
            rows = slice(r * i, r * i + h_out)
            cols = slice(r * j, r * j + w_out)
            window = xp[:, :, rows, cols]
            grad_kernel[:, :, i, j] = np.tensordot(grad_output, window, axes=([0, 2, 3], [0, 2, 3]))
            # (C, N, H, W) -> (N, C, H, W)
            contrib = np.tensordot(weights.kernel[:, :, i, j], grad_output, axes=([0], [1]))
            grad_xp[:, :, rows, cols] += contrib.transpose(1, 0, 2, 3)
    grad_bias = grad_output.sum(axis=(0, 2, 3)).astype(dtype)
    grad_x = grad_xp[:, :, p:p + x.shape[2], p:p + x.shape[3]]
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


@dataclass(frozen=True)
class PoolIndices:
    """Winning window slot (0..3, row-major) per pooled element."""
    input_shape: tuple
    slots: np.ndarray  # (N, C, H//2, W//2) int


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolIndices]:
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"input {h}x{w} is smaller than one 2x2 window")
    h2, w2 = h // 2, w // 2
    windows = (x[:, :, :2 * h2, :2 * w2]
               .reshape(n, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2, w2, 4))
    # argmax returns the first maximum, i.e. the earliest in row-major scan order
    slots = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, slots[..., None], axis=-1)[..., 0]
    return out, PoolIndices(x.shape, slots)


def maxpool2x2_backward(indices: PoolIndices, grad_output: np.ndarray) -> np.ndarray:
    grad_output = np.asarray(grad_output)
    if grad_output.shape != indices.slots.shape:
        raise ValueError(f"grad_output shape {grad_output.shape} != pooled shape {indices.slots.shape}")
    n, c, h, w = indices.input_shape
    h2, w2 = h // 2, w // 2
    routed = np.zeros((n, c, h2, w2, 4), dtype=grad_output.dtype)
    np.put_along_axis(routed, indices.slots[..., None], grad_output[..., None], axis=-1)
    grad_x = np.zeros(indices.input_shape, dtype=grad_output.dtype)
    grad_x[:, :, :2 * h2, :2 * w2] = (routed.reshape(n, c, h2, w2, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(n, c, 2 * h2, 2 * w2))
    return grad_x


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    grad_output = np.asarray(grad_output)
    if x.shape != grad_output.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {grad_output.shape}")
    return np.where(x > 0, grad_output, np.zeros((), dtype=grad_output.dtype))


def _linear_taps(src: int, dst: int):
    # half-pixel centres: s = (d + 0.5) * src/dst - 0.5, clamped to the border
    s = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    s = np.clip(s, 0.0, src - 1)
    lo = np.floor(s).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, s - lo


def bilinear_resize(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize the two trailing axes of an NCHW tensor with bilinear interpolation."""
    x = as_tensor4(x)
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dtype, copy=False)

    lo, hi, f = _linear_taps(x.shape[2], target_h)
    f = f.astype(dtype)[:, None]
    a, b = x[:, :, lo, :], x[:, :, hi, :]
    # a + f*(b - a) keeps constant inputs exactly constant
    x = a + f * (b - a)

    lo, hi, f = _linear_taps(x.shape[3], target_w)
    f = f.astype(dtype)
    a, b = x[:, :, :, lo], x[:, :, :, hi]
    return a + f * (b - a)
