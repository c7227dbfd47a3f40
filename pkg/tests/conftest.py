import numpy as np
import pytest

from weldloop.twin.policy import TwinPolicy


def random_twin(rng: np.random.Generator) -> TwinPolicy:
    """Twin with randomly scaled weights and biases so exports cover many
    shift/scale combinations."""
    twin = TwinPolicy(rng)
    for i, p in enumerate(twin.params):
        scale = 10.0 ** rng.uniform(-2, 1)
        p[...] = rng.normal(0.0, scale, size=p.shape)
        if i % 2 == 1 and rng.random() < 0.2:
            p[...] = 0.0
    return twin


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
