"""MNIST IDX loading and the drift tasks built on top of it."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn import Batch

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10
NUM_PIXELS = 784

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

TRANSFORM_KINDS = ("identity", "permute_pixels", "shift_labels")
DEFAULT_TASK_NAMES = {"identity": "original", "permute_pixels": "permuted",
                      "shift_labels": "label_shift"}


class DataError(Exception):
    """Problem with the input data files."""


class WrongMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images as an ``(n, 784)`` float32 array in [0, 1] plus integer labels."""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] != len(self.labels):
            raise ValueError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree"
            )
        if len(self.labels) < 1:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> Dataset:
        return Dataset(self.images[index], self.labels[index])

    def equals(self, other: Dataset) -> bool:
        return (np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))


def _read_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    size = 4 * (1 + ndim)
    if len(raw) < size:
        raise TruncatedFileError(f"{path}: header needs {size} bytes, file has {len(raw)}")
    found, *dims = struct.unpack(f">{1 + ndim}I", raw[:size])
    if found != magic:
        raise WrongMagicError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    expected = size + int(np.prod(dims))
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, file has {len(raw)}")
    return tuple(dims)


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images flattened to ``(n, rows * cols)``."""
    raw = Path(path).read_bytes()
    n, rows, cols = _read_header(raw, path, IMAGE_MAGIC, 3)
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = _read_header(raw, path, LABEL_MAGIC, 1)
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_mnist(images_path, labels_path) -> Dataset:
    try:
        pixels = read_idx_images(images_path)
        labels = read_idx_labels(labels_path)
    except FileNotFoundError as exc:
        raise DataError(f"missing data file: {exc.filename}") from exc
    if len(pixels) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(pixels)} images but {labels_path} holds {len(labels)} labels"
        )
    if len(labels) and labels.max() >= NUM_CLASSES:
        raise DataError(f"{labels_path}: label {labels.max()} outside [0, {NUM_CLASSES})")
    return Dataset(pixels.astype(np.float32) / np.float32(255.0), labels)


def write_idx(dataset: Dataset, images_path, labels_path, rows: int = 28, cols: int = 28) -> None:
    """Write a dataset back as IDX files (pixels re-quantised to bytes)."""
    n, width = dataset.images.shape
    if rows * cols != width:
        raise ValueError(f"{rows}x{cols} does not match image width {width}")
    pixels = np.rint(np.asarray(dataset.images, dtype=np.float64) * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2I", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


@dataclass(frozen=True)
class MnistSplits:
    train: Dataset
    validation: Dataset
    test: Dataset
    files: tuple[Path, ...] = field(default=())


def load_splits(data_dir, validation_size: int = 5000) -> MnistSplits:
    """Standard MNIST with the last ``validation_size`` training images held out."""
    data_dir = Path(data_dir)
    files = tuple(data_dir / name for name in TRAIN_FILES + TEST_FILES)
    full = load_mnist(files[0], files[1])
    test = load_mnist(files[2], files[3])
    if not 0 < validation_size < len(full):
        raise DataError(f"validation_size {validation_size} must be in (0, {len(full)})")
    cut = len(full) - validation_size
    return MnistSplits(full.subset(slice(0, cut)), full.subset(slice(cut, None)), test, files)


# -- transforms --------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    kind: str = "identity"
    seed: int = 0
    offset: int = 1

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {TRANSFORM_KINDS}")
        if self.kind == "shift_labels" and not 1 <= self.offset < NUM_CLASSES:
            raise ValueError(f"label offset must be in [1, {NUM_CLASSES}), got {self.offset}")

    def describe(self) -> str:
        if self.kind == "permute_pixels":
            return f"permute_pixels({self.seed})"
        if self.kind == "shift_labels":
            return f"shift_labels({self.offset})"
        return "identity"


def pixel_permutation(seed: int, size: int = NUM_PIXELS) -> np.ndarray:
    return np.random.default_rng(seed).permutation(size)


def apply_transform(dataset: Dataset, transform: Transform) -> Dataset:
    """Return a transformed copy; the input is left alone."""
    if transform.kind == "identity":
        return dataset
    if transform.kind == "permute_pixels":
        perm = pixel_permutation(transform.seed, dataset.images.shape[1])
        return Dataset(dataset.images[:, perm], dataset.labels)
    return Dataset(dataset.images, (dataset.labels + transform.offset) % NUM_CLASSES)


def permute_images(dataset: Dataset, perm: np.ndarray) -> Dataset:
    return Dataset(dataset.images[:, perm], dataset.labels)


# -- batching ----------------------------------------------------------------

def batch_indices(n: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """Shuffled mini-batches covering the dataset once; the last one may be short."""
    for idx in batch_indices(len(dataset), batch_size, epoch_seed):
        yield Batch(dataset.images[idx], dataset.labels[idx])


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# -- task sequences ----------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    name: str
    transform: Transform
    epochs: int

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"task {self.name!r}: epochs must be >= 1, got {self.epochs}")


def make_task_sequence(
    kinds: Sequence[str] = TRANSFORM_KINDS,
    epochs: int = 5,
    permute_seed: int = 2024,
    label_offset: int = 1,
) -> list[TaskSpec]:
    """Task list from transform kind names; task 0 must be the identity task.

    The default reproduces original -> permuted -> label-shifted.
    """
    kinds = list(kinds)
    if not kinds:
        raise ValueError("task sequence is empty")
    if kinds[0] != "identity":
        raise ValueError(f"the first (pre-training) task must be 'identity', got {kinds[0]!r}")
    tasks = []
    seen: dict[str, int] = {}
    for kind in kinds:
        if kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {kind!r}; expected one of {TRANSFORM_KINDS}")
        seen[kind] = seen.get(kind, 0) + 1
        name = DEFAULT_TASK_NAMES[kind]
        if seen[kind] > 1:
            name = f"{name}_{seen[kind]}"
        # repeated permuted tasks get distinct permutations
        transform = Transform(kind, seed=permute_seed + seen[kind] - 1, offset=label_offset)
        tasks.append(TaskSpec(name, transform, epochs))
    return tasks
