import numpy as np
import pytest

from maclab.npm import NetworkShape, init_params
from maclab.rng import substream


class FakeRng:
    """Deterministic stand-in for a numpy Generator; feeds preset uniforms."""

    def __init__(self, values):
        self.values = [float(v) for v in values]

    def random(self, n=None):
        if n is None:
            return self.values.pop(0)
        return np.array([self.values.pop(0) for _ in range(n)])

    def integers(self, *args, **kwargs):  # pragma: no cover - defensive
        raise AssertionError("integers() not expected in this test")


@pytest.fixture
def fake_rng():
    return FakeRng


@pytest.fixture
def tiny_shape():
    """Small network so finite-difference loops stay fast."""
    return NetworkShape(ue_hidden=(6,), bs_hidden=(6,), head_hidden=(6,))


@pytest.fixture
def tiny_params(tiny_shape):
    return init_params(tiny_shape, 2, 3, substream(123, "init"))
