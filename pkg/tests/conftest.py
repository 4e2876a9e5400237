import numpy as np
import pytest

from clhpo.clmethods import TrainSettings
from clhpo.streamgen import make_stream, synth_gaussian


@pytest.fixture(scope="session")
def small_stream():
    """3 tasks x 2 classes, 30 examples per class."""
    return make_stream(synth_gaussian(6, 4, 30, 4.0, seed=3), seed=11, n_tasks=3)


@pytest.fixture(scope="session")
def fast_settings():
    return TrainSettings(epochs=2, batch_size=16, buffer_capacity=40, hidden=(8,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
