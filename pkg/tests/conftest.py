import os

import numpy as np
import pytest

os.environ.setdefault("RILAB_CACHE", os.path.join(os.path.dirname(__file__), "_cache"))

from rilab import CubeEquilibriumCache, GreenTable


@pytest.fixture(scope="session")
def green():
    return GreenTable.cached(d=3, exact_radius=60)


@pytest.fixture(scope="session")
def cubes(green):
    return CubeEquilibriumCache(green)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260810)
