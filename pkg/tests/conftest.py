import numpy as np
import pytest

from metasort import network
from metasort.preprocess import preprocess_dataset
from metasort.spikegen import GenConfig, generate_dataset


@pytest.fixture(scope="session")
def small_ds():
    return preprocess_dataset(generate_dataset(GenConfig(comb_id=1, noise_sigma=0.05, n_spikes_per_class=60, seed=11)))


@pytest.fixture(scope="session")
def trained(small_ds):
    params, hist = network.train(small_ds, network.TrainConfig(max_epochs=40, seed=5))
    return params, hist


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
