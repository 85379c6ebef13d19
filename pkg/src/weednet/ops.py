"""Layer kernels: forward and backward passes for every layer kind in the network.

All image tensors are channel-last ``(B, H, W, C)``. Convolutions are stride 1
with valid padding; pooling is a 2x2 window with stride 2 and floor rounding.
Reductions are accumulated in float64 and cast back to the input dtype.
"""
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError
from .tensor import matmul


def conv_output_extent(input_extent, kernel, dilation=1):
    """Spatial extent after a valid, stride-1 convolution: ``i - d*(k-1)``."""
    effective = (kernel - 1) * dilation + 1
    if kernel < 1 or dilation < 1:
        raise ShapeError(f"kernel and dilation must be >= 1, got k={kernel}, d={dilation}")
    if effective > input_extent:
        raise ShapeError(
            f"effective kernel {effective} (k={kernel}, d={dilation}) exceeds input extent {input_extent}"
        )
    return input_extent - dilation * (kernel - 1)


def pool_output_extent(input_extent):
    if input_extent < 2:
        raise ShapeError(f"2x2 pooling needs an extent >= 2, got {input_extent}")
    return input_extent // 2


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_channels: int
    out_channels: int
    dilation: int = 1

    @property
    def effective_kernel(self):
        return (self.kernel - 1) * self.dilation + 1

    @property
    def weight_shape(self):
        return (self.kernel, self.kernel, self.in_channels, self.out_channels)

    @property
    def bias_shape(self):
        return (self.out_channels,)


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int

    @property
    def weight_shape(self):
        return (self.in_features, self.out_features)

    @property
    def bias_shape(self):
        return (self.out_features,)


def conv_param_count(spec):
    return spec.out_channels * (spec.kernel * spec.kernel * spec.in_channels + 1)


def dense_param_count(spec):
    return spec.in_features * spec.out_features + spec.out_features


class LayerGrads(NamedTuple):
    d_input: np.ndarray
    d_weights: Optional[np.ndarray] = None
    d_bias: Optional[np.ndarray] = None


class PoolIndices(NamedTuple):
    """Winning position (0..3, row-major inside the window) for every pooled cell."""

    argmax: np.ndarray
    input_shape: tuple


def _check_conv_operands(x, weights, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (B, H, W, C), got {x.shape}")
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise ShapeError(f"conv weights must be (k, k, Cin, Cout), got {weights.shape}")
    if weights.shape[2] != x.shape[3]:
        raise ShapeError(f"input has {x.shape[3]} channels, weights expect {weights.shape[2]}")
    if bias is not None and bias.shape != (weights.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[3]} output channels")


def im2col(x, kernel, dilation=1):
    """Unroll every receptive field into a row.

    Returns a float64 matrix of shape ``(B*H'*W', k*k*C)`` whose columns are
    ordered ``(u, v, c)``, matching ``weights.reshape(k*k*C, Cout)``, and the
    output grid ``(B, H', W')``.
    """
    b, h, w, c = x.shape
    ho = conv_output_extent(h, kernel, dilation)
    wo = conv_output_extent(w, kernel, dilation)
    span = (kernel - 1) * dilation + 1
    # (B, H', W', C, span, span) view, thinned to the dilated taps
    windows = sliding_window_view(x, (span, span), axis=(1, 2))[..., ::dilation, ::dilation]
    cols = np.empty((b, ho, wo, kernel, kernel, c), dtype=np.float64)
    cols[...] = windows.transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(b * ho * wo, kernel * kernel * c), (b, ho, wo)


def col2im(cols, input_shape, kernel, dilation=1):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input grid."""
    b, h, w, c = input_shape
    ho = h - dilation * (kernel - 1)
    wo = w - dilation * (kernel - 1)
    cols = cols.reshape(b, ho, wo, kernel * kernel, c)
    out = np.zeros(input_shape, dtype=np.float64)
    for u in range(kernel):
        for v in range(kernel):
            out[:, u * dilation:u * dilation + ho, v * dilation:v * dilation + wo, :] += cols[:, :, :, u * kernel + v, :]
    return out


def conv2d_naive(x, weights, bias=None, dilation=1):
    """Direct-summation reference convolution. Slow; meant as a test oracle."""
    _check_conv_operands(x, weights, bias)
    k = weights.shape[0]
    b, h, w, _ = x.shape
    ho = conv_output_extent(h, k, dilation)
    wo = conv_output_extent(w, k, dilation)
    cout = weights.shape[3]
    w64 = weights.astype(np.float64)
    x64 = x.astype(np.float64)
    out = np.zeros((b, ho, wo, cout), dtype=np.float64)
    for n in range(b):
        for y in range(ho):
            for xx in range(wo):
                acc = np.zeros(cout) if bias is None else bias.astype(np.float64).copy()
                for u in range(k):
                    for v in range(k):
                        acc += x64[n, y + u * dilation, xx + v * dilation, :] @ w64[u, v]
                out[n, y, xx] = acc
    return out.astype(x.dtype, copy=False)


def conv2d_forward(x, weights, bias=None, dilation=1, method="im2col"):
    """Valid, stride-1, dilated 2-D convolution.

    ``out[b, y, x, o] = bias[o] + sum_{u, v, c} x[b, y + u*d, x + v*d, c] * w[u, v, c, o]``

    ``method`` selects the im2col + GEMM fast path (default) or the
    direct-summation reference (``"naive"``).
    """
    if method == "naive":
        return conv2d_naive(x, weights, bias, dilation)
    if method != "im2col":
        raise ValueError(f"unknown convolution method {method!r}")
    return conv2d_forward_cols(x, weights, bias, dilation)[0]


def conv2d_forward_cols(x, weights, bias=None, dilation=1):
    """im2col convolution that also returns the column matrix for reuse in backward."""
    _check_conv_operands(x, weights, bias)
    k, _, cin, cout = weights.shape
    cols, (b, ho, wo) = im2col(x, k, dilation)
    out = cols @ weights.reshape(k * k * cin, cout).astype(np.float64)
    if bias is not None:
        out += bias
    return out.reshape(b, ho, wo, cout).astype(x.dtype, copy=False), cols


def conv2d_backward(x, weights, upstream, dilation=1, cols=None, input_grad=True):
    """Gradients of a convolution given the upstream gradient of its output.

    ``cols`` may pass in ``im2col(x, k, dilation)[0]`` saved from the forward
    pass. With ``input_grad=False`` the (often unused) input gradient is
    skipped and ``d_input`` is ``None``.
    """
    _check_conv_operands(x, weights, None)
    k, _, cin, cout = weights.shape
    if cols is None:
        cols, _ = im2col(x, k, dilation)
    b, h, w, _ = x.shape
    out_shape = (b, h - dilation * (k - 1), w - dilation * (k - 1), cout)
    if upstream.shape != out_shape:
        raise ShapeError(f"upstream {upstream.shape} does not match conv output {out_shape}")
    up = upstream.reshape(-1, cout).astype(np.float64)
    w2d = weights.reshape(k * k * cin, cout).astype(np.float64)
    d_w = (cols.T @ up).reshape(weights.shape)
    d_b = up.sum(axis=0)
    d_x = col2im(up @ w2d.T, x.shape, k, dilation).astype(x.dtype) if input_grad else None
    return LayerGrads(d_x, d_w.astype(x.dtype), d_b.astype(x.dtype))


def _pool_windows(x):
    b, h, w, c = x.shape
    ho, wo = pool_output_extent(h), pool_output_extent(w)
    cropped = x[:, :2 * ho, :2 * wo, :]
    # (B, Ho, 2, Wo, 2, C) -> (B, Ho, Wo, C, 4) with window cells in row-major order
    return cropped.reshape(b, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, 4)


def maxpool_forward(x):
    """2x2 / stride-2 max pooling; an odd trailing row or column is dropped."""
    if x.ndim != 4:
        raise ShapeError(f"pool input must be (B, H, W, C), got {x.shape}")
    windows = _pool_windows(x)
    # np.argmax returns the first maximal entry, i.e. the first in scan order
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, PoolIndices(argmax.astype(np.int8), x.shape)


def maxpool_backward(indices, upstream):
    argmax, input_shape = indices
    if upstream.shape != argmax.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match pooled shape {argmax.shape}")
    b, h, w, c = input_shape
    ho, wo = argmax.shape[1:3]
    routed = np.zeros(argmax.shape + (4,), dtype=upstream.dtype)
    np.put_along_axis(routed, argmax[..., None].astype(np.intp), upstream[..., None], axis=-1)
    routed = routed.reshape(b, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * ho, 2 * wo, c)
    d_x = np.zeros(input_shape, dtype=upstream.dtype)
    d_x[:, :2 * ho, :2 * wo, :] = routed
    return d_x


def dense_forward(x, weights, bias=None):
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    out = matmul(x, weights)
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
        out = out + bias
    return out


def dense_backward(x, weights, upstream):
    if upstream.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"upstream {upstream.shape} does not match dense output {(x.shape[0], weights.shape[1])}")
    d_w = matmul(x.T, upstream)
    d_b = upstream.sum(axis=0, dtype=np.float64).astype(upstream.dtype)
    d_x = matmul(upstream, weights.T)
    return LayerGrads(d_x, d_w, d_b)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    # subgradient at exactly 0 is taken as 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def softmax(logits):
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError(f"softmax expects (B, K) logits with K >= 1, got {logits.shape}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(logits.dtype, copy=False)
