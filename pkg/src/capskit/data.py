"""Loaders for the MNIST IDX and CIFAR-10 binary formats, plus k-fold splits."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidArgument

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class Dataset:
    """Images ``[N, C, H, W]`` in [0, 1] and integer labels ``[N]``.

    The arrays are made read-only, so a dataset can be shared freely.
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise InvalidArgument(f"images must be [N, C, H, W], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise InvalidArgument(
                f"{images.shape[0]} images but labels have shape {labels.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InvalidArgument("pixel values must lie in [0, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx])

    def head(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _idx_header(raw: bytes, path, magic: int, ndims: int):
    head = 4 + 4 * ndims
    if len(raw) >= 4:
        (seen,) = struct.unpack(">i", raw[:4])
        if seen != magic:
            raise FormatError(f"{path}: bad magic number {seen}, expected {magic}")
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header, expected {head} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndims}i", raw[4:head])
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return dims, head


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (uint8 images, magics 2051 and 2049)."""
    raw = _read_bytes(images_path)
    (n, rows, cols), off = _idx_header(raw, images_path, IDX_IMAGES_MAGIC, 3)
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(n, 1, rows, cols)
    raw = _read_bytes(labels_path)
    (m,), off = _idx_header(raw, labels_path, IDX_LABELS_MAGIC, 1)
    labels = np.frombuffer(raw, dtype=np.uint8, offset=off)
    if m != n:
        raise FormatError(f"{images_path} holds {n} images but {labels_path} holds {m} labels")
    return Dataset(pixels / 255.0, labels)


def write_idx(images_path, labels_path, pixels, labels) -> None:
    """Write uint8 ``pixels[N, H, W]`` and ``labels[N]`` as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4i", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2i", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def load_cifar10(batch_paths) -> Dataset:
    """Concatenate CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64))
    return Dataset(np.concatenate(images) / 255.0, np.concatenate(labels))


def write_cifar10(path, pixels, labels) -> None:
    """Write uint8 ``pixels[N, 3, 32, 32]`` and ``labels[N]`` as one batch file."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    with open(path, "wb") as fh:
        fh.write(np.concatenate([labels, pixels], axis=1).tobytes())


def _first_existing(root, name):
    for cand in (name, name + ".gz"):
        p = os.path.join(root, cand)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"{os.path.join(root, name)} not found (also tried .gz)")


def load_mnist(root, split: str = "train") -> Dataset:
    """Load the official MNIST train or test split from ``root``."""
    img, lab = MNIST_FILES[split]
    return load_idx(_first_existing(root, img), _first_existing(root, lab))


def load_cifar10_split(root, split: str = "train") -> Dataset:
    names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    return load_cifar10([_first_existing(root, n) for n in names])


def load_dataset(name: str, root, split: str = "train") -> Dataset:
    if name == "mnist":
        return load_mnist(root, split)
    if name == "cifar10":
        return load_cifar10_split(root, split)
    raise InvalidArgument(f"unknown dataset {name!r}; expected mnist or cifar10")


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray   # fold id per sample

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def kfold_split(n: int, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle ``range(n)`` with ``seed`` and deal the indices round-robin into ``k`` folds."""
    if k < 2:
        raise InvalidArgument(f"k must be >= 2, got {k}")
    if k > n:
        raise InvalidArgument(f"cannot split {n} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    assignments.flags.writeable = False
    return FoldPlan(k, assignments)
