"""Pure numpy implementations of the hot kernels.

Selected when the compiled ``_ckernels`` extension is unavailable or when
``COLLABDM_PURE_PYTHON=1``. Signatures mirror the extension exactly.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
TWO_PI = 6.283185307179586


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix_fill(key, counter, n):
    """Outputs ``counter .. counter+n-1`` of SplitMix64 seeded with ``key``."""
    steps = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(counter)
    with np.errstate(over="ignore"):
        return _mix64(np.uint64(key) + steps * GOLDEN)


def box_muller(bits, n):
    # math.* calls the platform libm, as the C kernel does, so both backends
    # agree bit for bit.
    out = np.empty(n, dtype=np.float64)
    u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    log, sqrt, cos, sin = math.log, math.sqrt, math.cos, math.sin
    for i in range(0, n, 2):
        u1 = 1.0 - u[i]
        u2 = u[i + 1]
        r = sqrt(-2.0 * log(u1))
        out[i] = r * cos(TWO_PI * u2)
        if i + 1 < n:
            out[i + 1] = r * sin(TWO_PI * u2)
    return out


def _windows(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, pad):
    k = w.shape[2]
    win = _windows(x, k, stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(g, w, height, width, stride, pad):
    n, _, ho, wo = g.shape
    cin, k = w.shape[1], w.shape[2]
    dxp = np.zeros((n, cin, height + 2 * pad, width + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                contrib.transpose(0, 3, 1, 2))
    return np.ascontiguousarray(dxp[:, :, pad:pad + height, pad:pad + width])


def conv2d_backward_weight(x, g, k, stride, pad):
    win = _windows(x, k, stride, pad)
    return np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
