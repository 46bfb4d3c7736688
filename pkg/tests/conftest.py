import numpy as np
import pytest

from grouptrain.benchmark import reference_datasets
from grouptrain.data import Dataset, SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def reference_bench():
    """The frozen reference benchmark (train, val, test)."""
    return reference_datasets()


@pytest.fixture(scope="session")
def small_bench():
    """A fast, smaller cousin of the reference benchmark for unit tests."""
    spec = SyntheticSpec(n_train=600, n_val=200, n_test=400, majority_fraction=0.95,
                         label_balance=(0.5, 0.5), core_separation=2.0,
                         spurious_separation=4.0, noise_dims=2, noise_sigma=1.0)
    return generate_synthetic(spec, 3)


@pytest.fixture()
def toy_separable():
    """Four linearly separable points with group annotations equal to labels."""
    features = np.array([[-2.0, 0.5], [-1.0, -0.5], [1.0, 0.5], [2.0, -0.5]])
    labels = np.array([0, 0, 1, 1])
    train = Dataset(features, labels, None, "toy-train")
    val = Dataset(features, labels, labels, "toy-val")
    return train, val
