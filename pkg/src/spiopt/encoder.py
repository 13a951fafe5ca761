"""Modulation pattern banks and the single-pixel measurement model."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PIXELS, SIDE
from .nn.serialize import atomic_write

GRAY = "gray"
BINARY = "binary"
HADAMARD_ORDER = 1024
HADAMARD_SIDE = 32


class BankError(ValueError):
    pass


@dataclass(frozen=True)
class PatternBank:
    """``M`` patterns over the 28x28 grid, one flattened pattern per row.

    Row order matters: for a binarized learned bank it is the rank order.
    """

    patterns: np.ndarray
    domain: str = GRAY
    provenance: str = "learned"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        p = np.asarray(self.patterns, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise BankError(f"patterns must be a non-empty (M, N) matrix, got shape {p.shape}")
        if self.domain == BINARY and not np.all((p == 0.0) | (p == 1.0)):
            raise BankError("binary bank holds values other than 0 and 1")
        if self.domain not in (GRAY, BINARY):
            raise BankError(f"unknown domain {self.domain!r}")
        p.flags.writeable = False
        object.__setattr__(self, "patterns", p)

    @property
    def count(self) -> int:
        return self.patterns.shape[0]

    @property
    def resolution(self) -> int:
        return self.patterns.shape[1]

    def rows(self, indices) -> "PatternBank":
        """Sub-bank keeping ``indices`` in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return PatternBank(self.patterns[idx], self.domain, self.provenance, dict(self.meta))

    def images(self) -> np.ndarray:
        side = int(round(np.sqrt(self.resolution)))
        return self.patterns.reshape(self.count, side, side)


def _flatten(images, resolution: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim in (1, 2) and x.size == resolution
    x = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if x.shape[1] != resolution:
        raise BankError(f"image has {x.shape[1]} pixels but bank resolution is {resolution}")
    return x, single


def measure(bank: PatternBank, images) -> np.ndarray:
    """Detector readings ``y[k] = sum_i pattern_k[i] * pixel[i]``.

    Accepts a single image (any shape with ``N`` entries) or a batch whose
    leading axis indexes images; returns ``(M,)`` or ``(n, M)`` accordingly.
    """
    x, single = _flatten(images, bank.resolution)
    y = x @ bank.patterns.T
    return y[0] if single else y


def random_bank(seed: int, count: int, resolution: int = PIXELS) -> PatternBank:
    """I.i.d. Bernoulli(1/2) binary patterns."""
    if count < 1:
        raise BankError("count must be >= 1")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(count, resolution)).astype(np.float64)
    return PatternBank(bits, BINARY, "random", {"seed": seed})


def sylvester(order: int) -> np.ndarray:
    """Sylvester-Hadamard matrix of a power-of-two order, entries +-1."""
    if order < 1 or order & (order - 1):
        raise BankError(f"Sylvester order must be a power of two, got {order}")
    h = np.ones((1, 1))
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


def sign_changes(rows: np.ndarray) -> np.ndarray:
    return np.count_nonzero(np.diff(np.sign(rows), axis=1), axis=1)


def sequency_order(h: np.ndarray) -> np.ndarray:
    """Row permutation sorting by number of sign changes (stable)."""
    return np.argsort(sign_changes(h), kind="stable")


def hadamard_bank(count: int) -> PatternBank:
    """Sequency-ordered Hadamard rows on a 32x32 grid, centre-cropped to 28x28.

    Cropped rows are no longer mutually orthogonal.
    """
    if not 1 <= count <= PIXELS:
        raise BankError(f"Hadamard bank supports 1..{PIXELS} patterns, got {count}")
    h = sylvester(HADAMARD_ORDER)
    h = h[sequency_order(h)[:count]]
    off = (HADAMARD_SIDE - SIDE) // 2
    crop = h.reshape(count, HADAMARD_SIDE, HADAMARD_SIDE)[:, off : off + SIDE, off : off + SIDE]
    return PatternBank((crop.reshape(count, PIXELS) + 1.0) / 2.0, BINARY, "hadamard")


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian detector noise.

    ``sigma`` is expressed in units of the noiseless measurement's standard
    deviation over the dataset (the ``scale`` passed to acquisition).
    """

    kind: str = "none"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseModel":
        return cls("gaussian", float(sigma))


def simulate_acquisition(bank: PatternBank, images, noise: NoiseModel = NoiseModel(), seed: int = 0, scale=1.0) -> np.ndarray:
    """Simulated DMD + photodiode readout.

    ``scale`` is the per-pattern (or scalar) dataset standard deviation of the
    noiseless readings; noise std is ``noise.sigma * scale``.
    """
    if bank.domain != BINARY:
        raise BankError("physical modulation requires binary patterns")
    y = measure(bank, images)
    if noise.kind == "none" or noise.sigma == 0:
        return y
    rng = np.random.default_rng(seed)
    return y + rng.standard_normal(y.shape) * (noise.sigma * np.asarray(scale, dtype=np.float64))


def pgm_bytes(image) -> bytes:
    """8-bit binary PGM of an image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 1:
        side = int(round(np.sqrt(img.size)))
        img = img.reshape(side, side)
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    pix = np.frombuffer(buf[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float64) / maxval


def export_pgm_stack(bank: PatternBank, directory) -> list[Path]:
    directory = Path(directory)
    width = max(4, len(str(bank.count - 1)))
    paths = []
    for k, img in enumerate(bank.images()):
        p = directory / f"pattern_{k:0{width}d}.pgm"
        atomic_write(p, pgm_bytes(img))
        paths.append(p)
    return paths
