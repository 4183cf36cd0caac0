import numpy as np
import pytest
from hypothesis import settings

from steinalign.numeric import make_rng

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return make_rng(12345, "tests")


def random_spd(rng, d, ridge=1.0):
    a = rng.standard_normal((d, d))
    return a @ a.T + ridge * np.eye(d)
