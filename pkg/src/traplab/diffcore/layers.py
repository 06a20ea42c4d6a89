"""Layers and small model builders on top of the tensor core.

Two classifier families are provided: a pure-affine MLP path so every
experiment can run without convolutions, and a small conv net within the
desk-scale limits (<= 32x32 spatial, <= 64 channels). Classifiers expose
a feature extractor / linear head split because downstream analysis
works on penultimate features.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    DiffError,
    Tensor,
    avg_pool2d,
    conv2d,
    leaky_relu,
    matmul,
    relu,
    tanh,
)

__all__ = [
    "Module",
    "Linear",
    "Conv2d",
    "Sequential",
    "Relu",
    "LeakyRelu",
    "Tanh",
    "Flatten",
    "AvgPool2d",
    "FeatureClassifier",
    "CLASSIFIER_ARCHS",
    "build_classifier",
    "build_discriminator",
]


class Module:
    """Base class: parameter discovery, grad reset, dtype conversion."""

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}" if not prefix else f"{prefix}.{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.weight = Tensor(
            rng.uniform(-limit, limit, size=(in_features, out_features)).astype(np.float32),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True):
        if in_channels > 64 or out_channels > 64:
            raise DiffError("Conv2d supports at most 64 channels")
        fan_in = kernel_size * kernel_size * in_channels
        fan_out = kernel_size * kernel_size * out_channels
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.weight = Tensor(
            rng.uniform(-limit, limit, size=(kernel_size, kernel_size, in_channels, out_channels)).astype(np.float32),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Relu(Module):
    def forward(self, x):
        return relu(x)


class LeakyRelu(Module):
    def __init__(self, negative_slope=0.2):
        self.negative_slope = negative_slope

    def forward(self, x):
        return leaky_relu(x, self.negative_slope)


class Tanh(Module):
    def forward(self, x):
        return tanh(x)


class Flatten(Module):
    def forward(self, x):
        return x.flatten_batch()


class AvgPool2d(Module):
    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        return avg_pool2d(x, self.k)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class FeatureClassifier(Module):
    """Classifier decomposed as feature trunk g plus a linear head.

    ``features`` returns the penultimate representation used for
    signatures, nearest-neighbor metrics, and detection scores.
    """

    def __init__(self, trunk, head, arch, input_shape, n_classes, feature_dim):
        self.trunk = trunk
        self.head = head
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.feature_dim = feature_dim

    def features(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        return self.trunk(x)

    def forward(self, x):
        return self.head(self.features(x))

    def logits_np(self, images, batch_size=512):
        """Plain-numpy convenience forward over a (possibly large) array."""
        images = np.asarray(images, dtype=np.float32)
        chunks = []
        for start in range(0, len(images), batch_size):
            chunks.append(self.forward(Tensor(images[start : start + batch_size])).data)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.n_classes), dtype=np.float32)

    def features_np(self, images, batch_size=512):
        images = np.asarray(images, dtype=np.float32)
        chunks = []
        for start in range(0, len(images), batch_size):
            chunks.append(self.features(Tensor(images[start : start + batch_size])).data)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.feature_dim), dtype=np.float32)

    def predict(self, images, batch_size=512):
        return self.logits_np(images, batch_size).argmax(axis=1)


CLASSIFIER_ARCHS = ("mlp", "cnn")


def _mlp_trunk(input_shape, rng, hidden=(256, 128)):
    in_dim = int(np.prod(input_shape))
    layers = [Flatten()]
    prev = in_dim
    for width in hidden:
        layers.append(Linear(prev, width, rng))
        layers.append(Relu())
        prev = width
    return Sequential(*layers), prev


def _cnn_trunk(input_shape, rng, feature_dim=64):
    h, w, c = input_shape
    trunk = Sequential(
        Conv2d(c, 8, 3, rng, padding=1),
        Relu(),
        AvgPool2d(2),
        Conv2d(8, 16, 3, rng, padding=1),
        Relu(),
        AvgPool2d(2),
        Flatten(),
        Linear((h // 4) * (w // 4) * 16, feature_dim, rng),
        Relu(),
    )
    return trunk, feature_dim


def build_classifier(arch, input_shape, n_classes, rng):
    """Construct a FeatureClassifier for one of CLASSIFIER_ARCHS."""
    if arch == "mlp":
        trunk, feat = _mlp_trunk(input_shape, rng)
    elif arch == "cnn":
        trunk, feat = _cnn_trunk(input_shape, rng)
    else:
        raise DiffError(f"unknown architecture {arch!r}; expected one of {CLASSIFIER_ARCHS}")
    head = Linear(feat, n_classes, rng)
    return FeatureClassifier(trunk, head, arch, input_shape, n_classes, feat)


def build_discriminator(arch, input_shape, rng):
    """Binary real-vs-poisoned discriminator sharing the classifier backbone.

    Returns a FeatureClassifier whose head emits a single logit."""
    if arch == "mlp":
        trunk, feat = _mlp_trunk(input_shape, rng)
    elif arch == "cnn":
        trunk, feat = _cnn_trunk(input_shape, rng)
    else:
        raise DiffError(f"unknown architecture {arch!r}; expected one of {CLASSIFIER_ARCHS}")
    head = Linear(feat, 1, rng)
    return FeatureClassifier(trunk, head, arch, input_shape, 1, feat)
