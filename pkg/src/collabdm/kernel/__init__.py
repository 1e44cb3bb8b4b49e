"""Tensor kernel: counter-based RNG and forward/adjoint layers.

``BACKEND`` names the implementation of the hot kernels in use
(``"cython"`` or ``"python"``).
"""
import os

import numpy as np

from ._backend import NAME as BACKEND
from .ops import (
    INSTANCE_NORM_EPS,
    avg_pool2,
    avg_pool2_backward,
    bilinear_matrix,
    bilinear_upsample,
    bilinear_upsample_backward,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    instance_norm,
    instance_norm_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    softmax_cross_entropy,
)
from .rng import RngStream, mix64

_default_dtype = np.dtype(np.float64 if os.environ.get("COLLABDM_FLOAT64") else np.float32)


def default_dtype():
    """Working precision for production paths (float32 unless COLLABDM_FLOAT64)."""
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _default_dtype = dtype


__all__ = [
    "BACKEND", "INSTANCE_NORM_EPS", "RngStream", "mix64", "default_dtype",
    "set_default_dtype", "avg_pool2", "avg_pool2_backward", "bilinear_matrix",
    "bilinear_upsample", "bilinear_upsample_backward", "conv2d",
    "conv2d_input_grad", "conv2d_weight_grad", "instance_norm",
    "instance_norm_backward", "linear", "linear_backward", "relu",
    "relu_backward", "softmax_cross_entropy",
]
