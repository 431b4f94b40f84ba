"""Labeled datasets: IDX (MNIST) files and synthetic Gaussian blobs."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class LabeledDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    def __post_init__(self):
        for X, y, name in ((self.X_train, self.y_train, "train"), (self.X_test, self.y_test, "test")):
            if X.shape[0] != y.shape[0]:
                raise ShapeError(f"{name} split: {X.shape[0]} examples but {y.shape[0]} labels")
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ShapeError(f"{name} split has labels outside [0, {self.n_classes})")

    @property
    def n_features(self) -> int:
        return int(np.prod(self.X_train.shape[1:]))


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into an array."""
    with _open(path) as fh:
        header = fh.read(4)
        if len(header) != 4 or header[0] != 0 or header[1] != 0:
            raise ValueError(f"{path}: not an IDX file")
        code, ndim = header[2], header[3]
        if code not in _IDX_DTYPES:
            raise ValueError(f"{path}: unknown IDX element type 0x{code:02x}")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        dtype = np.dtype(_IDX_DTYPES[code])
        data = fh.read()
    count = int(np.prod(dims)) if dims else 1
    if len(data) != count * dtype.itemsize:
        raise ValueError(f"{path}: expected {count * dtype.itemsize} payload bytes, got {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (gzip-compressed if the name ends in .gz)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("write_idx only supports uint8 arrays")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the output byte-stable
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, n_train: int | None = None, n_test: int | None = None) -> LabeledDataset:
    """Load MNIST-format IDX files from ``directory``; pixels scaled to [0, 1]."""
    directory = Path(directory)
    parts = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
        if images.ndim != 3 or labels.ndim != 1:
            raise ValueError(f"{split}: unexpected IDX shapes {images.shape}, {labels.shape}")
        parts[split] = (images.reshape(images.shape[0], -1).astype(float) / 255.0,
                        labels.astype(np.intp))
    (Xtr, ytr), (Xte, yte) = parts["train"], parts["test"]
    if n_train is not None:
        Xtr, ytr = Xtr[:n_train], ytr[:n_train]
    if n_test is not None:
        Xte, yte = Xte[:n_test], yte[:n_test]
    return LabeledDataset(Xtr, ytr, Xte, yte, n_classes=10)


def make_blobs(n_samples: int = 2000, n_features: int = 20, n_classes: int = 4,
               separation: float = 3.0, test_fraction: float = 0.2, seed: int = 0) -> LabeledDataset:
    """Gaussian classes with unit-variance noise.

    Class centers are i.i.d. ``N(0, separation**2 / 2 * I)``, so the
    difference of two centers has per-coordinate standard deviation
    ``separation``. The first ``test_fraction`` of the shuffled examples is
    the test split.
    """
    if n_classes < 2 or n_samples < n_classes:
        raise ConfigError("need at least two classes and one sample per class")
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((n_classes, n_features)) / np.sqrt(2.0)
    y = np.arange(n_samples) % n_classes
    rng.shuffle(y)
    X = centers[y] + rng.standard_normal((n_samples, n_features))
    n_test = int(round(test_fraction * n_samples))
    return LabeledDataset(X[n_test:], y[n_test:], X[:n_test], y[:n_test], n_classes)
