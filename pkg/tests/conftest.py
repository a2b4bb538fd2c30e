import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def bits16(a):
    """Bit patterns of an f16 array, for exact comparisons that also see -0 and NaN payloads."""
    return np.asarray(a, dtype=np.float16).view(np.uint16)
