import numpy as np
import pytest

from red import inference


def max_delta(model_a, model_b, inputs):
    """Largest absolute output difference across the given inputs."""
    worst = 0.0
    for x in inputs:
        ya = np.asarray(inference.forward(model_a, x)).ravel()
        yb = np.asarray(inference.forward(model_b, x)).ravel()
        worst = max(worst, float(np.abs(ya - yb).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
