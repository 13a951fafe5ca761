"""Squeeze-and-excitation weighting over measurement channels.

Each modulation pattern is one channel. Its scalar reading is already a
global descriptor, so the squeeze is the identity; the excitation is a
bottleneck ``M -> ceil(M/r) -> M`` ending in a sigmoid.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import ParameterSet, Tensor


class WeightingError(ValueError):
    pass


class ExcitationHead:
    def __init__(self, params: ParameterSet, channels: int, reduction: int = 16, rng: np.random.Generator | None = None, prefix: str = "head"):
        if channels < 1 or reduction < 1:
            raise WeightingError("channels and reduction ratio must be positive")
        self.channels = channels
        self.reduction = reduction
        self.hidden = math.ceil(channels / reduction)
        self.prefix = prefix
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w1 = params.add(f"{prefix}.fc1.weight", nn.dense_init(rng, self.hidden, channels))
        self.b1 = params.add(f"{prefix}.fc1.bias", np.zeros(self.hidden))
        self.w2 = params.add(f"{prefix}.fc2.weight", nn.dense_init(rng, channels, self.hidden))
        self.b2 = params.add(f"{prefix}.fc2.bias", np.zeros(channels))

    def __call__(self, descriptor) -> Tensor:
        return excite(self, descriptor)


def squeeze(y):
    """Identity: a single-pixel reading is its channel's global descriptor."""
    t = y if isinstance(y, Tensor) else Tensor(y)
    if t.shape[-1] < 1:
        raise WeightingError("measurement vector must have at least one channel")
    return y


def excite(head: ExcitationHead, descriptor) -> Tensor:
    """``sigmoid(A2 relu(A1 d + b1) + b2)`` for a (batch, M) or (M,) descriptor."""
    d = descriptor if isinstance(descriptor, Tensor) else Tensor(descriptor)
    single = d.data.ndim == 1
    if single:
        d = nn.reshape(d, (1, -1))
    if d.shape[-1] != head.channels:
        raise WeightingError(f"descriptor has {d.shape[-1]} channels, head expects {head.channels}")
    h = nn.relu(nn.dense(d, head.w1, head.b1))
    w = nn.sigmoid(nn.dense(h, head.w2, head.b2))
    return nn.reshape(w, (head.channels,)) if single else w


def apply_weights(y, w):
    """Elementwise channel scaling ``w * y``; tensors stay differentiable."""
    if isinstance(y, Tensor) or isinstance(w, Tensor):
        return nn.mul(y, w)
    y, w = np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64)
    if y.shape[-1] != w.shape[-1]:
        raise WeightingError(f"weights of length {w.shape[-1]} for {y.shape[-1]} channels")
    return y * w


def extract_static_scores(head: ExcitationHead, descriptors: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    """Dataset-mean excitation output, one score per pattern.

    ``descriptors`` are the (normalized) readings of every training image,
    shape (n, M), in a fixed order.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2 or len(descriptors) == 0:
        raise WeightingError("static scores need a non-empty (n, M) set of readings")
    total = np.zeros(head.channels)
    for start in range(0, len(descriptors), batch_size):
        total += excite(head, descriptors[start : start + batch_size]).data.sum(axis=0)
    return total / len(descriptors)


@dataclass(frozen=True)
class PatternRanking:
    permutation: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.permutation)

    def ranks(self) -> np.ndarray:
        """Rank (0 = highest weight) of every original pattern index."""
        r = np.empty_like(self.permutation)
        r[self.permutation] = np.arange(len(self.permutation))
        return r

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pattern_index", "score", "rank"])
        ranks = self.ranks()
        for k, s in enumerate(self.scores):
            writer.writerow([k, repr(float(s)), int(ranks[k])])
        return buf.getvalue()


def rank(scores) -> PatternRanking:
    """Descending stable sort; equal scores keep the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise WeightingError("scores must be a non-empty vector")
    perm = np.argsort(-scores, kind="stable")
    return PatternRanking(perm, scores.copy())
