"""Utility of a synthetic set: train fresh classifiers on it, test on real data."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernel
from .data import Dataset
from .distill import SyntheticSet
from .errors import ConfigError, DimensionError
from .kernel import RngStream

ARCHITECTURES = ("convnet", "mlp")


@dataclass(frozen=True)
class ClassifierSpec:
    """Classifier architecture and training schedule.

    ``convnet`` is ``num_blocks`` trainable conv -> instance norm -> ReLU ->
    avg-pool blocks and a linear head; ``mlp`` has one ReLU hidden layer of
    width ``hidden``. Training stops early once the epoch loss has not
    improved by ``tol`` for ``patience`` epochs.
    """

    arch: str = "convnet"
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    seed: int = 0
    channels: int = 16
    num_blocks: int = 2
    hidden: int = 128
    patience: int = 20
    tol: float = 1e-4

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0, lr > 0 and batch_size >= 1")


@dataclass(eq=False)
class ClassifierParams:
    arch: str
    input_shape: tuple
    num_classes: int
    weights: dict
    spec: ClassifierSpec = field(default=None, repr=False)

    def __eq__(self, other):
        return (isinstance(other, ClassifierParams) and self.arch == other.arch
                and self.weights.keys() == other.weights.keys()
                and all(np.array_equal(self.weights[k], other.weights[k]) for k in self.weights))


def init_classifier(spec: ClassifierSpec, input_shape, num_classes, dtype=None):
    dtype = np.dtype(dtype or kernel.default_dtype())
    rng = RngStream(spec.seed).substream("classifier-init")
    c, h, w = input_shape
    weights = {}

    def normal(shape, std):
        return (rng.normal(int(np.prod(shape))).reshape(shape) * std).astype(dtype)

    if spec.arch == "convnet":
        step = 2 ** spec.num_blocks
        if h % step or w % step:
            raise ConfigError(f"input {h}x{w} not divisible by 2**num_blocks = {step}")
        cin = c
        for b in range(spec.num_blocks):
            weights[f"conv{b}"] = normal((spec.channels, cin, 3, 3), np.sqrt(2.0 / (cin * 9)))
            cin = spec.channels
        feat = spec.channels * (h // step) * (w // step)
    else:
        feat = c * h * w
        weights["hidden_w"] = normal((spec.hidden, feat), np.sqrt(2.0 / feat))
        weights["hidden_b"] = np.zeros(spec.hidden, dtype=dtype)
        feat = spec.hidden
    weights["head_w"] = normal((num_classes, feat), np.sqrt(1.0 / feat))
    weights["head_b"] = np.zeros(num_classes, dtype=dtype)
    return ClassifierParams(spec.arch, tuple(input_shape), num_classes, weights, spec)


def _forward(params: ClassifierParams, x):
    w = params.weights
    cache = {}
    if params.arch == "convnet":
        blocks = []
        b = 0
        while f"conv{b}" in w:
            z = kernel.conv2d(x, w[f"conv{b}"], 1, 1)
            y, inv_std = kernel.instance_norm(z, return_inv_std=True)
            blocks.append((x, y, inv_std))
            x = kernel.avg_pool2(kernel.relu(y))
            b += 1
        cache["blocks"] = blocks
        cache["pooled_shape"] = x.shape
        feat = x.reshape(x.shape[0], -1)
    else:
        flat = x.reshape(x.shape[0], -1)
        pre = kernel.linear(flat, w["hidden_w"], w["hidden_b"])
        cache["flat"], cache["pre"] = flat, pre
        feat = kernel.relu(pre)
    cache["feat"] = feat
    return kernel.linear(feat, w["head_w"], w["head_b"]), cache


def _backward(params: ClassifierParams, cache, grad_logits):
    w = params.weights
    grads = {}
    g_feat, grads["head_w"], grads["head_b"] = kernel.linear_backward(
        grad_logits, cache["feat"], w["head_w"])
    if params.arch == "convnet":
        g = g_feat.reshape(cache["pooled_shape"])
        for b in reversed(range(len(cache["blocks"]))):
            x_in, y, inv_std = cache["blocks"][b]
            g = kernel.avg_pool2_backward(g)
            g = kernel.relu_backward(g, y)
            g = kernel.instance_norm_backward(g, y, inv_std)
            grads[f"conv{b}"] = kernel.conv2d_weight_grad(x_in, g, 3, 1, 1)
            if b:
                g = kernel.conv2d_input_grad(g, w[f"conv{b}"], x_in.shape, 1, 1)
    else:
        g = kernel.relu_backward(g_feat, cache["pre"])
        _, grads["hidden_w"], grads["hidden_b"] = kernel.linear_backward(
            g, cache["flat"], w["hidden_w"])
    return grads


def loss_and_grads(params: ClassifierParams, images, labels):
    """Mean cross-entropy on a batch and gradients for every weight."""
    logits, cache = _forward(params, np.asarray(images, dtype=params.weights["head_w"].dtype))
    loss, g = kernel.softmax_cross_entropy(logits, labels)
    return loss, _backward(params, cache, g.astype(logits.dtype))


def fit(images, labels, num_classes, spec: ClassifierSpec, dtype=None) -> ClassifierParams:
    """Mini-batch SGD with momentum on softmax cross-entropy."""
    dtype = np.dtype(dtype or kernel.default_dtype())
    images = np.asarray(images, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("cannot train on an empty set")
    params = init_classifier(spec, images.shape[1:], num_classes, dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.weights.items()}
    rng = RngStream(spec.seed).substream("classifier-batches")
    lr, mom = dtype.type(spec.lr), dtype.type(spec.momentum)
    best, stale = np.inf, 0
    for epoch in range(spec.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), spec.batch_size):
            idx = order[start:start + spec.batch_size]
            loss, grads = loss_and_grads(params, images[idx], labels[idx])
            total += loss * len(idx)
            for k, g in grads.items():
                velocity[k] = mom * velocity[k] + g
                params.weights[k] = params.weights[k] - lr * velocity[k]
        epoch_loss = total / len(order)
        if epoch_loss < best - spec.tol:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    return params


def train_classifier(synthetic: SyntheticSet, spec: ClassifierSpec) -> ClassifierParams:
    """Train on the expanded synthetic set (labels inherited by every crop)."""
    if synthetic.ipc == 0:
        raise ConfigError("synthetic set is empty")
    x, y = synthetic.expanded()
    return fit(x, y, synthetic.num_classes, spec)


def predict(params: ClassifierParams, images, chunk=1024) -> np.ndarray:
    images = np.asarray(images)
    if tuple(images.shape[1:]) != tuple(params.input_shape):
        raise DimensionError(f"images of shape {images.shape[1:]} for a classifier "
                             f"expecting {params.input_shape}")
    dtype = params.weights["head_w"].dtype
    out = [_forward(params, images[i:i + chunk].astype(dtype))[0]
           for i in range(0, len(images), chunk)]
    logits = np.concatenate(out) if out else np.zeros((0, params.num_classes), dtype)
    # argmax returns the first maximum: ties go to the lowest class index
    return logits.argmax(axis=1)


def test_accuracy(params: ClassifierParams, test: Dataset) -> float:
    """Fraction of test examples whose arg-max prediction equals the label."""
    return float(np.mean(predict(params, test.images) == test.labels))


# pytest would otherwise try to collect the function above as a test
test_accuracy.__test__ = False


def evaluate(synthetic: SyntheticSet, test: Dataset, spec: ClassifierSpec, repeats=1):
    """Accuracies of ``repeats`` classifiers with seeds ``spec.seed + r``."""
    return [test_accuracy(train_classifier(synthetic, replace(spec, seed=spec.seed + r)), test)
            for r in range(repeats)]


@dataclass
class AccuracyMatrix:
    train_archs: list
    test_archs: list
    mean: np.ndarray
    std: np.ndarray
    runs: dict

    def cell(self, train_arch, test_arch):
        i, j = self.train_archs.index(train_arch), self.test_archs.index(test_arch)
        return float(self.mean[i, j]), float(self.std[i, j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["train_arch", "test_arch", "mean_accuracy", "std_accuracy", "repeats"])
        for i, tr in enumerate(self.train_archs):
            for j, te in enumerate(self.test_archs):
                writer.writerow([tr, te, f"{self.mean[i, j]:.6f}", f"{self.std[i, j]:.6f}",
                                 len(self.runs[(tr, te)])])
        return buf.getvalue()


def cross_arch_eval(synthetic: SyntheticSet, train_arch: str, test_archs, repeats: int,
                    test: Dataset, spec: ClassifierSpec | None = None) -> AccuracyMatrix:
    """Accuracy of each test architecture trained on a set distilled with ``train_arch``.

    Cells hold the mean and population standard deviation over ``repeats``.
    """
    spec = spec or ClassifierSpec()
    test_archs = list(test_archs)
    mean = np.zeros((1, len(test_archs)))
    std = np.zeros((1, len(test_archs)))
    runs = {}
    for j, arch in enumerate(test_archs):
        accs = evaluate(synthetic, test, replace(spec, arch=arch), repeats)
        runs[(train_arch, arch)] = accs
        mean[0, j] = np.mean(accs)
        std[0, j] = np.std(accs)
    return AccuracyMatrix([train_arch], test_archs, mean, std, runs)
