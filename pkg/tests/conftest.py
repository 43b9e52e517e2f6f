import os

import numpy as np
import pytest

from intff.data import MNIST_FILES, load_mnist_split, write_idx_images, write_idx_labels

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_DATA_DIR = os.path.join(REPO_ROOT, "data", "mnist")


def mnist_data_dir():
    return os.environ.get("INTFF_DATA_DIR", DEFAULT_DATA_DIR)


def _mnist_available() -> bool:
    d = mnist_data_dir()
    return all(
        os.path.exists(os.path.join(d, name)) or os.path.exists(os.path.join(d, name[:-3]))
        for name in MNIST_FILES.values())


@pytest.fixture(scope="session")
def mnist_dir():
    if not _mnist_available():
        pytest.skip("MNIST IDX files not found; run `intff fetch-data --out data/mnist`")
    return mnist_data_dir()


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    return load_mnist_split(mnist_dir, "train")


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_mnist_split(mnist_dir, "test")


@pytest.fixture()
def tiny_idx_dir(tmp_path):
    """A miniature IDX dataset directory (40 train / 20 test images)."""
    rng = np.random.default_rng(7)
    train = rng.uniform(0.0, 1.0, size=(40, 784))
    test = rng.uniform(0.0, 1.0, size=(20, 784))
    train_labels = rng.integers(0, 10, size=40)
    test_labels = rng.integers(0, 10, size=20)
    d = tmp_path / "idx"
    d.mkdir()
    write_idx_images(d / "train-images-idx3-ubyte", train)
    write_idx_labels(d / "train-labels-idx1-ubyte", train_labels)
    write_idx_images(d / "t10k-images-idx3-ubyte", test)
    write_idx_labels(d / "t10k-labels-idx1-ubyte", test_labels)
    return d
