"""Seeded random ConvNet encoders.

An encoder is ``num_blocks`` repetitions of
conv3x3 (no bias) -> instance norm -> ReLU -> 2x2 average pool,
followed by a flatten. Weights are never trained: a 64-bit seed fully
determines them, which is what lets the server broadcast an encoder as a
single integer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .errors import ConfigError, DimensionError
from .kernel import RngStream


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of the encoder family.

    Defaults are the desk-scale configuration (2 blocks x 16 channels on
    1x16x16 inputs, embedding_dim 256); :meth:`full_scale` gives the
    3 x 128 configuration.
    """

    num_blocks: int = 2
    channels: int = 16
    kernel_size: int = 3
    input_shape: tuple = (1, 16, 16)
    eps: float = kernel.INSTANCE_NORM_EPS

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    @classmethod
    def full_scale(cls, input_shape=(1, 32, 32)):
        return cls(num_blocks=3, channels=128, input_shape=input_shape)

    def validate(self):
        if self.num_blocks < 1 or self.channels < 1:
            raise ConfigError("num_blocks and channels must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        _, h, w = self.input_shape
        step = 2 ** self.num_blocks
        if h % step or w % step:
            raise ConfigError(
                f"input {h}x{w} is not divisible by 2**num_blocks = {step}")

    @property
    def embedding_dim(self) -> int:
        _, h, w = self.input_shape
        step = 2 ** self.num_blocks
        return self.channels * (h // step) * (w // step)

    def weight_shapes(self):
        shapes = []
        cin = self.input_shape[0]
        for _ in range(self.num_blocks):
            shapes.append((self.channels, cin, self.kernel_size, self.kernel_size))
            cin = self.channels
        return shapes


@dataclass(frozen=True, eq=False)
class EncoderParams:
    seed: int
    spec: EncoderSpec
    weights: tuple

    def __eq__(self, other):
        return (isinstance(other, EncoderParams) and self.seed == other.seed
                and self.spec == other.spec
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights)))

    @property
    def dtype(self):
        return self.weights[0].dtype


def materialize(seed: int, spec: EncoderSpec, dtype=None) -> EncoderParams:
    """Draw Kaiming-normal weights ``N(0, 2 / (Cin * k * k))`` from ``RngStream(seed)``.

    Draw order is block-major, then output channel, input channel, row,
    column (C order of each weight tensor). Variates are generated in
    float64 and rounded to ``dtype`` afterwards.
    """
    if not isinstance(spec, EncoderSpec):
        raise ConfigError("spec must be an EncoderSpec")
    spec.validate()
    dtype = np.dtype(dtype or kernel.default_dtype())
    rng = RngStream(seed)
    weights = []
    for shape in spec.weight_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.normal(int(np.prod(shape))).reshape(shape) * np.sqrt(2.0 / fan_in)
        w = w.astype(dtype)
        w.setflags(write=False)
        weights.append(w)
    return EncoderParams(int(seed) & ((1 << 64) - 1), spec, tuple(weights))


def _check_batch(params, batch):
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != params.spec.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} does not match encoder input "
            f"(N, {', '.join(map(str, params.spec.input_shape))})")
    return np.ascontiguousarray(batch, dtype=params.dtype)


def forward(params: EncoderParams, batch):
    """Embeddings plus the activations the backward pass needs."""
    x = _check_batch(params, batch)
    pad = params.spec.kernel_size // 2
    cache = []
    for w in params.weights:
        z = kernel.conv2d(x, w, 1, pad)
        y, inv_std = kernel.instance_norm(z, params.spec.eps, return_inv_std=True)
        cache.append((x.shape, y, inv_std))
        x = kernel.avg_pool2(kernel.relu(y))
    return x.reshape(x.shape[0], params.spec.embedding_dim), cache


def backward(params: EncoderParams, cache, upstream):
    pad = params.spec.kernel_size // 2
    shape_out = cache[-1][1].shape
    g = upstream.reshape(shape_out[0], shape_out[1], shape_out[2] // 2, shape_out[3] // 2)
    for w, (in_shape, y, inv_std) in zip(reversed(params.weights), reversed(cache)):
        g = kernel.avg_pool2_backward(g)
        g = kernel.relu_backward(g, y)
        g = kernel.instance_norm_backward(g, y, inv_std)
        g = kernel.conv2d_input_grad(g, w, in_shape, 1, pad)
    return g


def embed(params: EncoderParams, batch) -> np.ndarray:
    """``(N, embedding_dim)`` embeddings of ``batch``."""
    return forward(params, batch)[0]


def embed_input_grad(params: EncoderParams, batch, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`embed` with respect to ``batch``."""
    x = _check_batch(params, batch)
    upstream = np.asarray(upstream, dtype=params.dtype)
    if upstream.shape != (x.shape[0], params.spec.embedding_dim):
        raise DimensionError(
            f"upstream shape {upstream.shape} != ({x.shape[0]}, {params.spec.embedding_dim})")
    _, cache = forward(params, x)
    return backward(params, cache, upstream)
