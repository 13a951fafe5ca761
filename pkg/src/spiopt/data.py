"""MNIST IDX loading and a small synthetic stand-in dataset."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIDE = 28
PIXELS = SIDE * SIDE
IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images as an ``(n, 28, 28)`` float array in [0, 1], labels as ``(n,)`` ints."""

    split: str
    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[1:] != (SIDE, SIDE):
            raise DatasetError(f"images must be (n, {SIDE}, {SIDE}), got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.images.flags.writeable = False
        if self.labels is not None:
            self.labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.images)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), PIXELS)

    @property
    def num_classes(self) -> int:
        return 10 if self.labels is None else max(10, int(self.labels.max()) + 1)

    def subset(self, n: int | None) -> "Dataset":
        """The first ``n`` items (all of them when ``n`` is None or too large)."""
        if n is None or n >= len(self):
            return self
        labels = None if self.labels is None else self.labels[:n].copy()
        return Dataset(self.split, self.images[:n].copy(), labels)

    def split_off(self, n: int) -> tuple["Dataset", "Dataset"]:
        """Split into the first ``len - n`` items and the last ``n``."""
        k = len(self) - n
        lab = self.labels
        a = Dataset(self.split, self.images[:k].copy(), None if lab is None else lab[:k].copy())
        b = Dataset(self.split, self.images[k:].copy(), None if lab is None else lab[k:].copy())
        return a, b


def _read(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(buf) < 4:
        raise DatasetError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise DatasetError(f"{path}: bad magic {got} (expected {magic})")
    if len(buf) < need:
        raise DatasetError(f"{path}: truncated header")
    return struct.unpack(f">{ndims}I", buf[4:need])


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 pixels, shape (n, rows, cols)."""
    path = Path(path)
    buf = _read(path)
    n, rows, cols = _header(buf, IMAGE_MAGIC, 3, path)
    body = buf[16:]
    if len(body) != n * rows * cols:
        raise DatasetError(f"{path}: expected {n * rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    path = Path(path)
    buf = _read(path)
    (n,) = _header(buf, LABEL_MAGIC, 1, path)
    body = buf[8:]
    if len(body) != n:
        raise DatasetError(f"{path}: expected {n} labels, found {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError(f"{path}: label {labels.max()} outside 0..9")
    return labels


def normalize(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def quantize(images: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise DatasetError(f"count mismatch: {len(raw)} images vs {len(labels)} labels")
    if raw.shape[1:] != (SIDE, SIDE):
        raise DatasetError(f"{images_path}: images are {raw.shape[1:]}, expected {SIDE}x{SIDE}")
    return Dataset(split, normalize(raw), labels)


def find_mnist(directory, split: str) -> tuple[Path, Path]:
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
            if (directory / cand).exists():
                found.append(directory / cand)
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] in {directory}")
    return found[0], found[1]


def load_mnist(directory, split: str) -> Dataset:
    images, labels = find_mnist(directory, split)
    return load_idx(images, labels, split)


def synthetic_dataset(seed: int, count: int, split: str = "train") -> Dataset:
    """Bright rectangles on a dark field, labelled by the quadrant of their centre.

    Labels: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    """
    if count < 1:
        raise DatasetError("count must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.zeros((count, SIDE, SIDE))
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        h, w = rng.integers(4, 11, size=2)
        top = rng.integers(0, SIDE - h + 1)
        left = rng.integers(0, SIDE - w + 1)
        level = rng.uniform(0.6, 1.0)
        images[i, top : top + h, left : left + w] = level
        images[i] += rng.uniform(0.0, 0.1, size=(SIDE, SIDE))
        cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
        labels[i] = 2 * int(cy >= SIDE / 2) + int(cx >= SIDE / 2)
    return Dataset(split, np.clip(images, 0.0, 1.0), labels)
