import numpy as np
import pytest

from transferlab.inits import init_store
from transferlab.models import build_cbr


@pytest.fixture
def tiny_graph():
    # 48px is the smallest input whose final feature map clears the 3x3 floor
    return build_cbr("cbr-tiny-desk", (48, 48, 3), 3)


@pytest.fixture
def tiny_store(tiny_graph):
    return init_store(tiny_graph, "random", seed=40)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
