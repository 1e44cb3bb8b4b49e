"""Distribution-matching distillation.

The loss for one encoder is the sum over classes of the squared distance
between the mean real embedding and the mean synthetic embedding. Real
means are treated as constants; gradients flow to the stored synthetic
pixels, through partition-and-expand when it is enabled.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import kernel
from .data import ClientShard, Dataset, decode_tensor, encode_tensor, sample_class_indices
from .errors import BadMagicError, ConfigError, DimensionError, FormatError, TruncatedError
from .kernel import RngStream

SYN_MAGIC = b"CDS1"
SYN_BATCH_CAP = 256


@dataclass(frozen=True)
class DMConfig:
    local_lr: float = 1.0
    server_lr: float = 10.0
    local_iters: int = 1000
    batch: int = 512
    momentum: float = 0.5
    ipc: int = 10
    pae_l: int = 1
    syn_batch_cap: int = SYN_BATCH_CAP

    def __post_init__(self):
        if min(self.local_lr, self.server_lr) <= 0 or self.batch < 1 or self.ipc < 1:
            raise ConfigError("learning rates, batch and ipc must be positive")
        if self.local_iters < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("local_iters must be >= 0 and momentum in [0, 1)")
        if self.pae_l < 1 or self.syn_batch_cap < 1:
            raise ConfigError("pae_l and syn_batch_cap must be positive")


class SyntheticSet:
    """Per-class learnable images, stored as one ``(classes, ipc, C, H, W)`` array.

    Labels are implicit in the first axis. ``momentum`` has the same shape
    and is optimizer state; it is not serialized.
    """

    def __init__(self, images, pae_l=1, momentum=None):
        images = np.asarray(images)
        if images.ndim != 5:
            raise DimensionError(f"synthetic images must be (classes, ipc, C, H, W), "
                                 f"got {images.shape}")
        _, _, _, h, w = images.shape
        if pae_l < 1 or h % pae_l or w % pae_l:
            raise ConfigError(f"pae_l = {pae_l} must divide image size {h}x{w}")
        self.images = images
        self.pae_l = int(pae_l)
        self.momentum = np.zeros_like(images) if momentum is None else momentum

    @property
    def num_classes(self):
        return self.images.shape[0]

    @property
    def ipc(self):
        return self.images.shape[1]

    @property
    def image_shape(self):
        return tuple(self.images.shape[2:])

    @property
    def stored_scalars(self) -> int:
        return int(self.images.size)

    def __eq__(self, other):
        return (isinstance(other, SyntheticSet) and self.pae_l == other.pae_l
                and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images))

    def __repr__(self):
        return (f"SyntheticSet(classes={self.num_classes}, ipc={self.ipc}, "
                f"shape={self.image_shape}, pae_l={self.pae_l})")

    def copy(self):
        return SyntheticSet(self.images.copy(), self.pae_l, self.momentum.copy())

    def expanded(self):
        """Training view: ``(images, labels)`` after partition-and-expand."""
        c, n = self.images.shape[:2]
        flat = self.images.reshape((c * n,) + self.image_shape)
        x = pae_expand(flat, self.pae_l)
        labels = np.repeat(np.arange(c), n * self.pae_l ** 2)
        return x, labels

    def to_bytes(self) -> bytes:
        c, n = self.images.shape[:2]
        head = SYN_MAGIC + struct.pack("<III", c, n, self.pae_l)
        return head + encode_tensor(self.images.reshape((c * n,) + self.image_shape))

    @classmethod
    def from_bytes(cls, buf, offset=0, dtype=None):
        """Decode a set; returns ``(SyntheticSet, next_offset)``."""
        buf = memoryview(buf)
        if len(buf) - offset < 16:
            raise TruncatedError("synthetic-set header truncated")
        if bytes(buf[offset:offset + 4]) != SYN_MAGIC:
            raise BadMagicError(f"expected {SYN_MAGIC!r}, got {bytes(buf[offset:offset + 4])!r}")
        c, n, l = struct.unpack_from("<III", buf, offset + 4)
        arr, end = decode_tensor(buf, offset + 16)
        if arr.ndim != 4 or arr.shape[0] != c * n:
            raise FormatError(f"synthetic tensor shape {arr.shape} disagrees with header "
                              f"({c} classes x {n} images)")
        arr = arr.reshape((c, n) + arr.shape[1:]).astype(dtype or kernel.default_dtype())
        return cls(arr, l), end

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=None):
        with open(path, "rb") as fh:
            buf = fh.read()
        syn, end = cls.from_bytes(buf, dtype=dtype)
        if end != len(buf):
            raise FormatError(f"{len(buf) - end} trailing bytes in synthetic-set file")
        return syn


def init_synthetic(shard: ClientShard, dataset: Dataset, ipc: int, pae_l: int,
                   rng: RngStream, dtype=None) -> SyntheticSet:
    """Start from real examples of each class, falling back to U[0, 1] noise.

    Class ``y`` uses ``rng.substream(y)``: up to ``ipc`` real examples drawn
    without replacement, then noise for the remaining slots.
    """
    if ipc < 1:
        raise ConfigError("ipc must be at least 1")
    dtype = np.dtype(dtype or kernel.default_dtype())
    shape = dataset.image_shape
    size = int(np.prod(shape))
    images = np.empty((dataset.num_classes, ipc) + shape, dtype=dtype)
    for y in range(dataset.num_classes):
        r = rng.substream(y)
        idx = sample_class_indices(shard, y, ipc, r)
        images[y, :len(idx)] = dataset.images[idx]
        missing = ipc - len(idx)
        if missing:
            images[y, len(idx):] = r.uniform(missing * size).reshape((missing,) + shape)
    return SyntheticSet(images, pae_l)


def pae_expand(images, l: int):
    """Split each image into ``l x l`` crops and resize each crop back to full size.

    Output order is row-major over (image, crop row, crop column).
    """
    images = np.asarray(images)
    n, c, h, w = images.shape
    if l < 1 or h % l or w % l:
        raise ConfigError(f"partition factor {l} must divide image size {h}x{w}")
    if l == 1:
        return images
    ch, cw = h // l, w // l
    crops = images.reshape(n, c, l, ch, l, cw).transpose(0, 2, 4, 1, 3, 5)
    crops = crops.reshape(n * l * l, c, ch, cw)
    return kernel.bilinear_upsample(crops, (h, w))


def pae_expand_backward(grad, l: int):
    """Adjoint of :func:`pae_expand`: routes expanded gradients to stored pixels."""
    if l == 1:
        return grad
    m, c, h, w = grad.shape
    n = m // (l * l)
    ch, cw = h // l, w // l
    g = kernel.bilinear_upsample_backward(grad, (ch, cw))
    g = g.reshape(n, l, l, c, ch, cw).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(g.reshape(n, c, h, w))


def dm_loss(real_means: dict, syn_batches: dict, params):
    """Sum over classes of ``|| real_mean_y - mean(embed(syn_batch_y)) ||^2``.

    Classes without an entry in ``real_means`` are skipped. Returns
    ``(loss, per_class)``.
    """
    per_class = {}
    for y in sorted(syn_batches):
        if y not in real_means:
            continue
        target = np.asarray(real_means[y])
        e = enc.embed(params, syn_batches[y])
        if target.shape != (e.shape[1],):
            raise DimensionError(f"class {y}: real mean has shape {target.shape}, "
                                 f"embedding dim is {e.shape[1]}")
        diff = target - e.mean(axis=0)
        per_class[y] = float(np.dot(diff, diff))
    return float(sum(per_class.values())), per_class


def _syn_batch_slots(synthetic: SyntheticSet, rng: RngStream, cap: int):
    """Indices into each class's expanded samples used for this step."""
    count = synthetic.ipc * synthetic.pae_l ** 2
    if count <= cap:
        return np.arange(count)
    return np.sort(rng.sample(count, cap))


def dm_grad(synthetic: SyntheticSet, real_means: dict, params, rng: RngStream,
            cap: int = SYN_BATCH_CAP):
    """Loss, per-class terms, and gradient with respect to the stored pixels.

    Each class uses all of its expanded samples when there are at most
    ``cap`` of them, otherwise a uniform subsample of ``cap`` drawn from
    ``rng.substream(y)``. All participating classes share one encoder pass.
    """
    l = synthetic.pae_l
    dtype = params.dtype
    grads = np.zeros(synthetic.images.shape, dtype=dtype)
    classes = [y for y in range(synthetic.num_classes) if y in real_means]
    if not classes:
        return 0.0, {}, grads
    expanded, slots = [], []
    for y in classes:
        x = pae_expand(synthetic.images[y].astype(dtype, copy=False), l)
        s = _syn_batch_slots(synthetic, rng.substream(y), cap)
        expanded.append(x)
        slots.append(s)
    batch = np.concatenate([x[s] for x, s in zip(expanded, slots)])
    emb, cache = enc.forward(params, batch)
    upstream = np.zeros_like(emb)
    per_class = {}
    start = 0
    for y, s in zip(classes, slots):
        e = emb[start:start + len(s)]
        target = np.asarray(real_means[y], dtype=dtype)
        if target.shape != (e.shape[1],):
            raise DimensionError(f"class {y}: real mean has shape {target.shape}, "
                                 f"embedding dim is {e.shape[1]}")
        diff = target - e.mean(axis=0)
        per_class[y] = float(np.dot(diff, diff))
        upstream[start:start + len(s)] = (-2.0 / len(s)) * diff
        start += len(s)
    g_batch = enc.backward(params, cache, upstream)
    start = 0
    for y, x, s in zip(classes, expanded, slots):
        g_exp = np.zeros_like(x)
        g_exp[s] = g_batch[start:start + len(s)]
        grads[y] = pae_expand_backward(g_exp, l)
        start += len(s)
    return float(sum(per_class.values())), per_class, grads


def sgd_step(synthetic: SyntheticSet, grads, lr: float, momentum: float) -> SyntheticSet:
    """``v <- momentum * v + g``; ``x <- clip(x - lr * v, 0, 1)``. Returns a new set."""
    grads = np.asarray(grads)
    if grads.shape != synthetic.images.shape:
        raise DimensionError(f"gradient shape {grads.shape} != {synthetic.images.shape}")
    dtype = synthetic.images.dtype
    v = dtype.type(momentum) * synthetic.momentum + grads.astype(dtype, copy=False)
    x = np.clip(synthetic.images - dtype.type(lr) * v, 0, 1).astype(dtype, copy=False)
    return SyntheticSet(x, synthetic.pae_l, v)


def class_means(params, dataset: Dataset, shard: ClientShard, classes, batch: int,
                rng: RngStream):
    """Mean embedding of a fresh real batch per class held by ``shard``.

    Class ``y`` samples with ``rng.substream(y)``. Returns
    ``{y: (mean, batch_size)}`` for classes with at least one example.
    """
    picks = {}
    for y in classes:
        idx = sample_class_indices(shard, y, batch, rng.substream(y))
        if len(idx):
            picks[y] = idx
    if not picks:
        return {}
    order = sorted(picks)
    emb = enc.embed(params, dataset.images[np.concatenate([picks[y] for y in order])])
    out, start = {}, 0
    for y in order:
        n = len(picks[y])
        out[y] = (emb[start:start + n].mean(axis=0), n)
        start += n
    return out


def local_distill(shard: ClientShard, dataset: Dataset, config: DMConfig,
                  spec: enc.EncoderSpec, rng: RngStream, dtype=None) -> SyntheticSet:
    """Client-side distribution matching on one shard.

    Stream layout: ``rng.substream("init")`` initializes the set; iteration
    ``i`` draws its encoder seed from ``rng.substream("encoders")`` (the
    ``i``-th 64-bit word) and uses ``rng.substream("iter", i)`` for its
    real and synthetic batches.
    """
    if len(shard) == 0:
        raise ConfigError("cannot distill an empty shard")
    dtype = np.dtype(dtype or kernel.default_dtype())
    syn = init_synthetic(shard, dataset, config.ipc, config.pae_l, rng.substream("init"), dtype)
    seeds = rng.substream("encoders").bits(config.local_iters)
    present = shard.classes()
    for i in range(config.local_iters):
        params = enc.materialize(int(seeds[i]), spec, dtype)
        step = rng.substream("iter", i)
        means = class_means(params, dataset, shard, present, config.batch, step.substream("real"))
        targets = {y: m for y, (m, _) in means.items()}
        _, _, grads = dm_grad(syn, targets, params, step.substream("syn"), config.syn_batch_cap)
        syn = sgd_step(syn, grads, config.local_lr, config.momentum)
    syn.momentum = np.zeros_like(syn.images)
    return syn
