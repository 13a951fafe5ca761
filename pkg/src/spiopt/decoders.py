"""Decoders that consume weighted measurement vectors."""

from __future__ import annotations

import numpy as np

from . import nn
from .data import SIDE
from .nn import ParameterSet, Tensor

RECONSTRUCT = "reconstruct"
CLASSIFY = "classify"


class DecoderError(ValueError):
    pass


class ReconstructionNet:
    """Dense lift to a 7x7 feature map, then two stride-2 transposed convolutions.

    ``K -> 7*7*C`` (ReLU) -> ``C x 7 x 7`` -> ``C/2 x 14 x 14`` (ReLU) -> ``1 x 28 x 28`` (sigmoid)
    """

    task = RECONSTRUCT
    first_layer = ("fc.weight", "fc.bias")

    def __init__(self, params: ParameterSet, inputs: int, rng: np.random.Generator, channels: int = 32, kernel: int = 4, prefix: str = "decoder"):
        if inputs < 1:
            raise DecoderError("decoder needs at least one input")
        c, half = channels, channels // 2
        self.inputs, self.channels, self.prefix = inputs, channels, prefix
        self.fc_w = params.add(f"{prefix}.fc.weight", nn.dense_init(rng, 7 * 7 * c, inputs))
        self.fc_b = params.add(f"{prefix}.fc.bias", np.zeros(7 * 7 * c))
        self.up1_w = params.add(f"{prefix}.up1.weight", nn.conv_init(rng, (c, half, kernel, kernel), transposed=True))
        self.up1_b = params.add(f"{prefix}.up1.bias", np.zeros(half))
        self.up2_w = params.add(f"{prefix}.up2.weight", nn.conv_init(rng, (half, 1, kernel, kernel), transposed=True))
        self.up2_b = params.add(f"{prefix}.up2.bias", np.zeros(1))

    def __call__(self, y) -> Tensor:
        y = _as_batch(y, self.inputs)
        h = nn.relu(nn.dense(y, self.fc_w, self.fc_b))
        h = nn.reshape(h, (y.shape[0], self.channels, 7, 7))
        h = nn.relu(nn.conv_transpose2d(h, self.up1_w, self.up1_b, stride=2, padding=1))
        h = nn.sigmoid(nn.conv_transpose2d(h, self.up2_w, self.up2_b, stride=2, padding=1))
        return nn.reshape(h, (y.shape[0], SIDE, SIDE))

    def loss(self, out: Tensor, target) -> Tensor:
        return nn.mse(out, np.asarray(target, dtype=np.float64).reshape(out.shape))


class ClassifierNet:
    """MLP ``K -> 256 -> 256 -> classes``; trained through softmax cross-entropy."""

    task = CLASSIFY
    first_layer = ("fc1.weight", "fc1.bias")

    def __init__(self, params: ParameterSet, inputs: int, rng: np.random.Generator, hidden: int = 256, classes: int = 10, prefix: str = "decoder"):
        if inputs < 1:
            raise DecoderError("decoder needs at least one input")
        self.inputs, self.classes, self.prefix = inputs, classes, prefix
        self.w1 = params.add(f"{prefix}.fc1.weight", nn.dense_init(rng, hidden, inputs))
        self.b1 = params.add(f"{prefix}.fc1.bias", np.zeros(hidden))
        self.w2 = params.add(f"{prefix}.fc2.weight", nn.dense_init(rng, hidden, hidden))
        self.b2 = params.add(f"{prefix}.fc2.bias", np.zeros(hidden))
        self.w3 = params.add(f"{prefix}.fc3.weight", nn.dense_init(rng, classes, hidden))
        self.b3 = params.add(f"{prefix}.fc3.bias", np.zeros(classes))

    def __call__(self, y) -> Tensor:
        """Logits, shape (batch, classes)."""
        y = _as_batch(y, self.inputs)
        h = nn.relu(nn.dense(y, self.w1, self.b1))
        h = nn.relu(nn.dense(h, self.w2, self.b2))
        return nn.dense(h, self.w3, self.b3)

    def loss(self, logits: Tensor, labels) -> Tensor:
        return nn.softmax_cross_entropy(logits, labels)


def _as_batch(y, width: int) -> Tensor:
    t = y if isinstance(y, Tensor) else Tensor(y)
    if t.data.ndim == 1:
        t = nn.reshape(t, (1, -1))
    if t.shape[-1] != width:
        raise DecoderError(f"decoder expects {width} measurements, got {t.shape[-1]}")
    return t


def build_decoder(task: str, params: ParameterSet, inputs: int, rng: np.random.Generator, classes: int = 10, channels: int = 32, hidden: int = 256):
    if task == RECONSTRUCT:
        return ReconstructionNet(params, inputs, rng, channels=channels)
    if task == CLASSIFY:
        return ClassifierNet(params, inputs, rng, hidden=hidden, classes=classes)
    raise DecoderError(f"unknown task {task!r}")


def decode_image(net: ReconstructionNet, y_weighted) -> np.ndarray:
    """Reconstruct 28x28 image(s) from weighted readings."""
    out = net(y_weighted).data
    return out[0] if np.ndim(y_weighted) == 1 else out


def classify(net: ClassifierNet, y_weighted) -> np.ndarray:
    """Class probabilities for weighted readings."""
    p = nn.softmax(net(y_weighted)).data
    return p[0] if np.ndim(y_weighted) == 1 else p


def mse_loss(prediction, target) -> float:
    return float(nn.mse(Tensor(prediction), Tensor(target)).data)


def cross_entropy_loss(probabilities, labels) -> float:
    """Mean negative log-likelihood of integer labels under given probabilities."""
    p = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return float(-np.mean(np.log(np.clip(p[np.arange(len(labels)), labels], 1e-300, None))))
