import os
from pathlib import Path

import numpy as np
import pytest

from kalman_drift.data import TEST_FILES, TRAIN_FILES, Dataset, MnistSplits, write_idx

MNIST_DIR = Path(os.environ.get("MNIST_DIR", "/root/data/mnist"))


def prototype_data(n, width, seed, noise=0.15):
    """Ten noisy class prototypes; easy to learn, hard to memorise by accident."""
    rng = np.random.default_rng(seed)
    protos = np.random.default_rng(12345).random((10, width))
    labels = rng.integers(0, 10, n)
    images = np.clip(protos[labels] + rng.normal(0, noise, (n, width)), 0, 1)
    return Dataset(images.astype(np.float32), labels)


def toy_splits(width=16, n_train=240, n_val=60, n_test=60):
    return MnistSplits(prototype_data(n_train, width, 1), prototype_data(n_val, width, 2),
                       prototype_data(n_test, width, 3))


@pytest.fixture
def splits():
    return toy_splits()


@pytest.fixture
def idx_dir(tmp_path):
    """Tiny MNIST-shaped IDX files: 300 train (last 60 for validation), 60 test."""
    d = tmp_path / "idx"
    d.mkdir()
    # quantise first so the files round-trip exactly
    train = prototype_data(300, 784, 1)
    test = prototype_data(60, 784, 3)
    write_idx(train, d / TRAIN_FILES[0], d / TRAIN_FILES[1])
    write_idx(test, d / TEST_FILES[0], d / TEST_FILES[1])
    return d


def mnist_available():
    return all((MNIST_DIR / f).exists() for f in TRAIN_FILES + TEST_FILES)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
