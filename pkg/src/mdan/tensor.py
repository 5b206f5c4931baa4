"""Dense (n, c, h, w) tensor primitives with analytic backward passes.

Tensors are plain ``numpy.ndarray`` objects of rank 4. Every forward
primitive that the network trains through has a matching ``*_backward``
function taking the upstream gradient and whatever the forward needed.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from mdan import _kernels

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


def _check4d(x, name="x"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@dataclass
class ConvKernel:
    """Convolution weights (out, in, kh, kw), optional bias and geometry."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"kernel weight must be 4-D, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weight.shape[0]} output channels"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0:
        return 0
    return span // stride + 1


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def conv2d(x: Tensor, k: ConvKernel) -> Tensor:
    """2-D cross-correlation with symmetric zero padding.

    Output size follows ``(h + 2*pad - kh) // stride + 1``; a trailing row or
    column that does not fit a full stride step is not visited.
    """
    _check4d(x)
    if x.shape[1] != k.in_channels:
        raise ShapeError(
            f"conv2d: input {x.shape} has {x.shape[1]} channels but kernel "
            f"{k.weight.shape} expects {k.in_channels}"
        )
    _, _, kh, kw = k.weight.shape
    out_h = conv_output_size(x.shape[2], kh, k.stride, k.padding)
    out_w = conv_output_size(x.shape[3], kw, k.stride, k.padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: input {x.shape} too small for kernel {k.weight.shape} "
            f"with padding {k.padding}"
        )
    dtype = np.result_type(x.dtype, k.weight.dtype)
    xp = _pad(x.astype(dtype, copy=False), k.padding)
    w = np.ascontiguousarray(k.weight, dtype=dtype)
    b = np.zeros(k.out_channels, dtype) if k.bias is None else k.bias.astype(dtype)
    return _kernels.conv2d_forward(xp, w, b, out_h, out_w, k.stride)


def conv2d_backward(x: Tensor, k: ConvKernel, grad_out: Tensor):
    """Return ``(grad_x, grad_weight, grad_bias)``; grad_bias is None without bias."""
    _check4d(x)
    _, _, kh, kw = k.weight.shape
    expected = (
        x.shape[0],
        k.out_channels,
        conv_output_size(x.shape[2], kh, k.stride, k.padding),
        conv_output_size(x.shape[3], kw, k.stride, k.padding),
    )
    if grad_out.shape != expected:
        raise ShapeError(
            f"conv2d_backward: grad_out {grad_out.shape} does not match "
            f"forward output {expected}"
        )
    s, pad = k.stride, k.padding
    out_h, out_w = expected[2], expected[3]
    g = np.ascontiguousarray(grad_out, dtype=np.float64)
    xp = _pad(x.astype(np.float64, copy=False), pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : (out_h - 1) * s + 1 : s, : (out_w - 1) * s + 1 : s]
    grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = g.sum(axis=(0, 2, 3)) if k.bias is not None else None
    w = np.ascontiguousarray(k.weight, dtype=np.float64)
    gxp = _kernels.conv2d_grad_input(g, w, xp.shape[2], xp.shape[3], s)
    grad_x = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (n, c*r*r, h, w) into (n, c, h*r, w*r)."""
    _check4d(x)
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    out = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(n, c // (r * r), h * r, w * r))


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _check4d(x)
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"space_to_depth: spatial dims {h}x{w} not divisible by {r}")
    out = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c * r * r, h // r, w // r))


# the two are mutual inverses, so each is the other's backward
pixel_shuffle_backward = space_to_depth


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    y, _ = max_pool2d_with_indices(x, k, stride)
    return y


def max_pool2d_with_indices(x: Tensor, k: int = 2, stride: int = 2):
    """Max pooling; also returns the flat in-window argmax for the backward."""
    _check4d(x)
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"max_pool2d: window {k}x{k} larger than input {h}x{w}")
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :out_h, :out_w].reshape(n, c, out_h, out_w, k * k)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def max_pool2d_backward(grad_out, idx, input_shape, k=2, stride=2):
    n, c, h, w = input_shape
    out_h, out_w = idx.shape[2], idx.shape[3]
    gx = np.zeros(input_shape, dtype=np.float64)
    rows = (np.arange(out_h) * stride)[:, None] + idx // k
    cols = (np.arange(out_w) * stride)[None, :] + idx % k
    nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(gx, (nn[:, :, None, None], cc[:, :, None, None], rows, cols), grad_out)
    return gx


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (n, c, 1, 1)."""
    _check4d(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out, input_shape):
    h, w = input_shape[2], input_shape[3]
    return np.broadcast_to(grad_out / (h * w), input_shape).copy()


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max, shape (n, c, 1, 1)."""
    _check4d(x)
    return x.max(axis=(2, 3), keepdims=True)


def global_max_pool_backward(grad_out, x):
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    gx = np.zeros_like(flat, dtype=np.float64)
    np.put_along_axis(gx, idx[..., None], grad_out.reshape(n, c, 1), axis=-1)
    return gx.reshape(x.shape)


def channel_mean(x: Tensor) -> Tensor:
    """Mean across channels at every position, shape (n, 1, h, w)."""
    _check4d(x)
    return x.mean(axis=1, keepdims=True)


def channel_mean_backward(grad_out, input_shape):
    return np.broadcast_to(grad_out / input_shape[1], input_shape).copy()


def channel_max(x: Tensor) -> Tensor:
    """Max across channels at every position, shape (n, 1, h, w)."""
    _check4d(x)
    return x.max(axis=1, keepdims=True)


def channel_max_backward(grad_out, x):
    idx = x.argmax(axis=1)[:, None]
    gx = np.zeros_like(x, dtype=np.float64)
    np.put_along_axis(gx, idx, grad_out, axis=1)
    return gx


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    """Backward given the forward *output* ``y``."""
    return grad_out * y * (1.0 - y)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return a * b


def broadcast_mul(features: Tensor, mask: Tensor) -> Tensor:
    """Spatial-wise product of (n, c, h, w) features with an (n, 1, h, w) mask."""
    _check4d(features, "features")
    _check4d(mask, "mask")
    n, _, h, w = features.shape
    if mask.shape != (n, 1, h, w):
        raise ShapeError(
            f"broadcast_mul: mask {mask.shape} incompatible with features "
            f"{features.shape}; expected {(n, 1, h, w)}"
        )
    return features * mask


def broadcast_mul_backward(grad_out, features, mask):
    return grad_out * mask, (grad_out * features).sum(axis=1, keepdims=True)


def softmax_pair(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """Two-way softmax between matching logits ``a`` and ``b``."""
    _same_shape(a, b, "softmax_pair")
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    total = ea + eb
    return ea / total, eb / total


def softmax_pair_backward(g1, g2, s1, s2):
    """Gradients w.r.t. the logits given upstream grads of ``s1`` and ``s2``."""
    # s2 = 1 - s1, so everything flows through d = a - b
    gd = (g1 - g2) * s1 * s2
    return gd, -gd
