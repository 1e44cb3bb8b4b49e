"""Datasets, raw file I/O, toy data, and non-IID client partitioning.

Raw tensor file (little-endian)::

    b"CDT1" | dtype u8 (0 = float32, 1 = uint8 pixels) | rank u8 | dims u32 x rank | payload

Raw label file::

    b"CDL1" | count u32 | labels u16 x count
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigError, EmptyDatasetError, FormatError,
                     LabelRangeError, TruncatedError)
from .kernel import RngStream, bilinear_upsample

TENSOR_MAGIC = b"CDT1"
LABEL_MAGIC = b"CDL1"
DTYPE_F32 = 0
DTYPE_U8 = 1


# raw tensor format

def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code = DTYPE_U8
    else:
        code = DTYPE_F32
        arr = arr.astype("<f4")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    head = TENSOR_MAGIC + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf, offset=0):
    """Decode one tensor record; returns ``(array, next_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < 6:
        raise TruncatedError("tensor header truncated")
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise BadMagicError(f"expected {TENSOR_MAGIC!r}, got {bytes(buf[offset:offset + 4])!r}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    offset += 6
    if code not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"unknown tensor dtype code {code}")
    if len(buf) - offset < 4 * rank:
        raise TruncatedError("tensor dims truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = np.dtype("<f4") if code == DTYPE_F32 else np.dtype(np.uint8)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise TruncatedError(f"tensor payload truncated: need {nbytes} bytes, "
                             f"have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                        offset=offset).reshape(shape).copy()
    if code == DTYPE_F32:
        arr = arr.astype(np.float32)
    return arr, offset + nbytes


def encode_labels(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise LabelRangeError("labels must fit in u16")
    return LABEL_MAGIC + struct.pack("<I", labels.size) + labels.astype("<u2").tobytes()


def decode_labels(buf):
    buf = memoryview(buf)
    if len(buf) < 8:
        raise TruncatedError("label header truncated")
    if bytes(buf[:4]) != LABEL_MAGIC:
        raise BadMagicError(f"expected {LABEL_MAGIC!r}, got {bytes(buf[:4])!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    if len(buf) - 8 < 2 * count:
        raise TruncatedError(f"label payload truncated: need {2 * count} bytes")
    return np.frombuffer(buf, dtype="<u2", count=count, offset=8).astype(np.int64)


# datasets

@dataclass(eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    _by_class: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise FormatError(f"{len(self.labels)} labels for {len(self.images)} images")
        if len(self.images) == 0:
            raise EmptyDatasetError("dataset has no examples")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if self.split == "train":
            missing = set(range(self.num_classes)) - set(np.unique(self.labels).tolist())
            if missing:
                raise FormatError(f"classes without training examples: {sorted(missing)}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.num_classes == other.num_classes
                and self.split == other.split
                and self.images.dtype == other.images.dtype
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_indices(self, y: int) -> np.ndarray:
        if self._by_class is None:
            self._by_class = {c: np.flatnonzero(self.labels == c)
                              for c in range(self.num_classes)}
        return self._by_class[y]


def save_raw(dataset: Dataset, images_path, labels_path):
    Path(images_path).write_bytes(encode_tensor(dataset.images))
    Path(labels_path).write_bytes(encode_labels(dataset.labels))


def load_raw(images_path, labels_path, num_classes=None, split="train") -> Dataset:
    """Read a dataset stored as a CDT1 tensor file and a CDL1 label file.

    uint8 pixels are scaled by 1/255; float32 pixels must already lie in
    [0, 1]. ``num_classes`` defaults to ``max(label) + 1``.
    """
    buf = Path(images_path).read_bytes()
    images, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    if images.ndim != 4:
        raise FormatError(f"image tensor must have rank 4, got {images.ndim}")
    if images.shape[0] == 0:
        raise EmptyDatasetError(f"{images_path}: dataset has no examples")
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / np.float32(255.0)
    elif not np.all(np.isfinite(images)) or images.min() < 0 or images.max() > 1:
        raise FormatError("float pixels must be finite and lie in [0, 1]")
    labels = decode_labels(Path(labels_path).read_bytes())
    if len(labels) != len(images):
        raise FormatError(f"{len(labels)} labels for {len(images)} images")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.max() >= num_classes:
        raise LabelRangeError(f"label {int(labels.max())} out of range for {num_classes} classes")
    return Dataset(images, labels, int(num_classes), split)


def generate_toy(num_classes=4, per_class=50, shape=(1, 16, 16), spread=0.15, seed=0,
                 test_per_class=None, template_res=None):
    """Gaussian blobs around per-class random template images, clamped to [0, 1].

    Templates are uniform noise in [0, 1]; with ``template_res = r`` they
    are drawn at ``r x r`` and bilinearly resized to the image size, which
    gives them image-like spatial correlation. Train and test examples use
    separate substreams. Returns ``(train, test, templates)`` where
    ``templates`` has shape ``(num_classes, *shape)``.
    """
    if per_class < 2:
        raise ConfigError("per_class must be at least 2")
    if num_classes < 1 or spread < 0:
        raise ConfigError("num_classes must be positive and spread non-negative")
    test_per_class = per_class if test_per_class is None else test_per_class
    shape = tuple(shape)
    size = int(np.prod(shape))
    root = RngStream(seed).substream("toy")
    if template_res is None:
        templates = root.substream("templates").uniform(num_classes * size).reshape(
            (num_classes,) + shape)
    else:
        if template_res < 1:
            raise ConfigError("template_res must be positive")
        c = shape[0]
        low = root.substream("templates").uniform(num_classes * c * template_res ** 2)
        low = low.reshape(num_classes, c, template_res, template_res)
        templates = bilinear_upsample(low, shape[1:])

    def split(tag, count):
        rng = root.substream(tag)
        noise = rng.normal(num_classes * count * size).reshape((num_classes, count) + shape)
        x = np.clip(templates[:, None] + spread * noise, 0.0, 1.0)
        x = x.reshape((num_classes * count,) + shape).astype(np.float32)
        y = np.repeat(np.arange(num_classes), count)
        return x, y

    xtr, ytr = split("train", per_class)
    xte, yte = split("test", test_per_class)
    return (Dataset(xtr, ytr, num_classes, "train"),
            Dataset(xte, yte, num_classes, "test"),
            templates.astype(np.float32))


# partitioning

@dataclass(frozen=True)
class PartitionSpec:
    K: int = 5
    beta: float = 0.5
    seed: int = 0
    iid: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")


@dataclass(eq=False)
class ClientShard:
    client_id: int
    indices_by_class: dict

    @property
    def indices(self) -> np.ndarray:
        parts = [self.indices_by_class[y] for y in sorted(self.indices_by_class)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def count(self, y: int) -> int:
        return len(self.indices_by_class.get(y, ()))

    def __len__(self):
        return sum(len(v) for v in self.indices_by_class.values())

    def classes(self):
        return [y for y in sorted(self.indices_by_class) if len(self.indices_by_class[y])]


def largest_remainder(p, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``p * total``.

    Floors first, then hands the leftover units to the largest fractional
    parts; ties go to the lower index.
    """
    raw = np.asarray(p, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    left = total - int(counts.sum())
    if left > 0:
        frac = raw - counts
        order = sorted(range(len(p)), key=lambda i: (-frac[i], i))
        for i in order[:left]:
            counts[i] += 1
    return counts


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec, proportions=None):
    """Split the training indices over ``spec.K`` clients, class by class.

    For class ``y`` the stream ``RngStream(spec.seed).substream(y)`` first
    draws ``p ~ Dir(beta * 1_K)`` (skipped when ``proportions`` is given,
    or uniform ``1/K`` when ``spec.iid``), then shuffles the class's
    indices with a full Fisher-Yates pass. The shuffled indices are cut into
    contiguous runs for clients ``0..K-1`` with largest-remainder counts.

    ``proportions`` maps a class (or ``None`` for every class) to a length-K
    vector, overriding the drawn ``p``.
    """
    shards = {k: {} for k in range(spec.K)}
    root = RngStream(spec.seed)
    for y in range(dataset.num_classes):
        idx = dataset.class_indices(y)
        rng = root.substream(y)
        if proportions is not None:
            p = np.asarray(proportions[y] if y in proportions else proportions[None], dtype=float)
            if p.shape != (spec.K,) or p.min() < 0 or not np.isclose(p.sum(), 1.0):
                raise ConfigError("injected proportions must be a length-K probability vector")
        elif spec.iid:
            p = np.full(spec.K, 1.0 / spec.K)
        else:
            p = rng.dirichlet(spec.beta, spec.K)
        order = idx[rng.permutation(len(idx))]
        counts = largest_remainder(p, len(idx))
        start = 0
        for k in range(spec.K):
            shards[k][y] = order[start:start + counts[k]]
            start += counts[k]
    return [ClientShard(k, shards[k]) for k in range(spec.K)]


def sample_class_indices(shard: ClientShard, y: int, batch: int, rng: RngStream) -> np.ndarray:
    """Up to ``batch`` dataset indices of class ``y`` held by ``shard``.

    Uniform without replacement when the shard has at least ``batch``
    examples; otherwise every example, in random order.
    """
    if batch < 1:
        raise ConfigError("batch size must be at least 1")
    pool = shard.indices_by_class.get(y)
    if pool is None or len(pool) == 0:
        return np.zeros(0, dtype=np.int64)
    return pool[rng.sample(len(pool), min(batch, len(pool)))]


def sample_class_batch(shard: ClientShard, dataset: Dataset, y: int, batch: int,
                       rng: RngStream) -> np.ndarray:
    return dataset.images[sample_class_indices(shard, y, batch, rng)]


def full_shard(dataset: Dataset, client_id=0) -> ClientShard:
    """A single shard holding every training example."""
    return ClientShard(client_id, {y: dataset.class_indices(y)
                                   for y in range(dataset.num_classes)})
