"""Forward and adjoint numerical layers on numpy arrays.

Images use the N x C x H x W layout. Every function preserves the floating
dtype of its main input (float32 in production, float64 for gradient
checks). Backward functions take the upstream gradient and return the exact
vector-Jacobian product; none of them keep hidden state.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, InputError
from ._backend import impl

INSTANCE_NORM_EPS = 1e-5


def _check_rank(name, arr, rank):
    if arr.ndim != rank:
        raise DimensionError(f"{name}: expected rank {rank}, got shape {arr.shape}")


def _as_float(x):
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    return np.ascontiguousarray(x)


def _conv_args(x, w, stride, pad):
    x = _as_float(x)
    w = np.ascontiguousarray(np.asarray(w, dtype=x.dtype))
    _check_rank("conv2d input", x, 4)
    _check_rank("conv2d weights", w, 4)
    if w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: input channels (axis 1 of input) = {x.shape[1]} but weight "
            f"input channels (axis 1 of weights) = {w.shape[1]}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes 2,3 must be equal and odd, got {w.shape[2:]}")
    if stride < 1 or pad < 0:
        raise InputError(f"conv2d: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    k = w.shape[2]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise DimensionError(
            f"conv2d: spatial axes 2,3 of input {x.shape[2:]} with pad {pad} "
            f"are smaller than kernel {k}")
    return x, w


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation (no kernel flip), no bias."""
    x, w = _conv_args(x, w, stride, pad)
    if x.shape[0] == 0:
        k = w.shape[2]
        return np.zeros((0, w.shape[0], conv_output_size(x.shape[2], k, stride, pad),
                         conv_output_size(x.shape[3], k, stride, pad)), dtype=x.dtype)
    return impl.conv2d_forward(x, w, stride, pad)


def conv2d_input_grad(grad, w, input_shape, stride=1, pad=0):
    grad = _as_float(grad)
    w = np.ascontiguousarray(np.asarray(w, dtype=grad.dtype))
    n, c, h, wd = input_shape
    k = w.shape[2]
    expect = (n, w.shape[0], conv_output_size(h, k, stride, pad),
              conv_output_size(wd, k, stride, pad))
    if grad.shape != expect:
        raise DimensionError(f"conv2d_input_grad: upstream shape {grad.shape} != {expect}")
    if c != w.shape[1]:
        raise DimensionError("conv2d_input_grad: channel axis 1 disagrees with weights")
    if n == 0:
        return np.zeros((0, c, h, wd), dtype=grad.dtype)
    return impl.conv2d_backward_input(grad, w, h, wd, stride, pad)


def conv2d_weight_grad(x, grad, kernel_size, stride=1, pad=0):
    x = _as_float(x)
    grad = np.ascontiguousarray(np.asarray(grad, dtype=x.dtype))
    expect = (x.shape[0], grad.shape[1],
              conv_output_size(x.shape[2], kernel_size, stride, pad),
              conv_output_size(x.shape[3], kernel_size, stride, pad))
    if grad.shape != expect:
        raise DimensionError(f"conv2d_weight_grad: upstream shape {grad.shape} != {expect}")
    if x.shape[0] == 0:
        return np.zeros((grad.shape[1], x.shape[1], kernel_size, kernel_size), dtype=x.dtype)
    return impl.conv2d_backward_weight(x, grad, kernel_size, stride, pad)


def instance_norm(x, eps=INSTANCE_NORM_EPS, return_inv_std=False):
    """Per-(n, c) standardization with no affine parameters.

    With ``return_inv_std`` the per-slice ``1/sqrt(var + eps)`` is returned as
    well, for use by :func:`instance_norm_backward`.
    """
    x = _as_float(x)
    _check_rank("instance_norm input", x, 4)
    if x.shape[2] * x.shape[3] < 1:
        raise DimensionError("instance_norm: empty spatial extent")
    mean = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv_std
    return (y, inv_std) if return_inv_std else y


def instance_norm_backward(grad, y, inv_std):
    """Input adjoint given the forward output ``y`` and ``inv_std``."""
    g_mean = grad.mean(axis=(2, 3), keepdims=True)
    gy_mean = (grad * y).mean(axis=(2, 3), keepdims=True)
    return inv_std * (grad - g_mean - y * gy_mean)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, x):
    return np.where(x > 0, grad, 0).astype(grad.dtype, copy=False)


def avg_pool2(x):
    _check_rank("avg_pool2 input", x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial axes 2,3 must be even, got ({h}, {w})")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad):
    g = grad * grad.dtype.type(0.25)
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def linear(x, w, b=None):
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    _check_rank("linear input", x, 2)
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear: input features (axis 1) = {x.shape[1]} but weight axis 1 = {w.shape[1]}")
    out = x @ w.T
    if b is not None:
        out = out + b
    return out


def linear_backward(grad, x, w):
    """Returns ``(d_input, d_weight, d_bias)``."""
    return grad @ w, grad.T @ x, grad.sum(axis=0)


def bilinear_matrix(size_in, size_out, dtype=np.float64):
    """Interpolation matrix ``M`` (size_out x size_in), align_corners=False.

    Output coordinate ``d`` samples the input at ``(d + 0.5) * in / out - 0.5``,
    clamped below at 0; neighbours beyond the last pixel are clamped to it.
    """
    scale = size_in / size_out
    m = np.zeros((size_out, size_in), dtype=np.float64)
    for d in range(size_out):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size_in - 1)
        i1 = min(i0 + 1, size_in - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m.astype(dtype)


def bilinear_upsample(x, size):
    """Resize the last two axes of ``x`` to ``size = (H, W)``."""
    x = _as_float(x)
    _check_rank("bilinear_upsample input", x, 4)
    mh = bilinear_matrix(x.shape[2], size[0], x.dtype)
    mw = bilinear_matrix(x.shape[3], size[1], x.dtype)
    return np.einsum("ih,nchw,jw->ncij", mh, x, mw, optimize=True)


def bilinear_upsample_backward(grad, in_size):
    mh = bilinear_matrix(in_size[0], grad.shape[2], grad.dtype)
    mw = bilinear_matrix(in_size[1], grad.shape[3], grad.dtype)
    return np.einsum("ih,ncij,jw->nchw", mh, grad, mw, optimize=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits)
    _check_rank("softmax_cross_entropy logits", logits, 2)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean()) if n else 0.0
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    if n:
        grad /= n
    return loss, grad
