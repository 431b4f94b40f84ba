from pathlib import Path

import numpy as np
import pytest

from enkfopt.data import load_mnist, make_blobs, read_idx, write_idx
from enkfopt.errors import ConfigError

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist1k"


@pytest.mark.parametrize("name", ["a-idx3-ubyte", "a-idx3-ubyte.gz"])
def test_idx_round_trip(tmp_path, name):
    arr = np.random.default_rng(0).integers(0, 256, size=(4, 3, 2)).astype(np.uint8)
    write_idx(tmp_path / name, arr)
    back = read_idx(tmp_path / name)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, arr)


@pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST subset not fetched")
def test_mnist_subset():
    ds = load_mnist(MNIST_DIR)
    assert ds.X_train.shape == (1000, 784) and ds.X_test.shape == (1000, 784)
    assert 0.0 <= ds.X_train.min() and ds.X_train.max() <= 1.0
    assert np.all(np.bincount(ds.y_train, minlength=10) == 100)
    assert np.all(np.bincount(ds.y_test, minlength=10) == 100)
    small = load_mnist(MNIST_DIR, n_train=50, n_test=20)
    assert small.X_train.shape[0] == 50 and small.X_test.shape[0] == 20


def test_mnist_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


def test_blobs_shapes_and_determinism():
    a = make_blobs(400, 5, 3, seed=1)
    b = make_blobs(400, 5, 3, seed=1)
    assert a.X_train.shape == (320, 5) and a.X_test.shape == (80, 5)
    np.testing.assert_array_equal(a.X_train, b.X_train)
    assert set(np.unique(a.y_train)) == {0, 1, 2}


def test_blobs_rejects_single_class():
    with pytest.raises(ConfigError):
        make_blobs(10, 2, 1)
