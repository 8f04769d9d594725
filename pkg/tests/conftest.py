import numpy as np
import pytest

from fedsim.data import DataShard
from fedsim.models import LossModel
from fedsim.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(12345)


def random_shard(gen, n=20, d=4, c=3, device_id=0):
    features = gen.normal(size=(n, d))
    labels = gen.integers(0, c, size=n)
    return DataShard(device_id, features, labels)


@pytest.fixture
def small_shard():
    gen = RngStream(7).generator()
    return random_shard(gen, n=24, d=5, c=3)


@pytest.fixture
def mlr_model():
    return LossModel("mlr", d_in=5, n_classes=3)


@pytest.fixture
def mlp_model():
    return LossModel("mlp1", d_in=5, n_classes=3, hidden=4)


@pytest.fixture
def separable_shard():
    # four points, linearly separable in two dimensions
    features = np.array([[1.0, 0.0], [2.0, 0.5], [-1.0, 0.0], [-2.0, -0.5]])
    labels = np.array([0, 0, 1, 1])
    return DataShard(0, features, labels)
