import math

import numpy as np
import pytest

from src.dynamics import DoublingBaselineMap, IntermittentCircleMap
from src.hyptimes import HyperbolicParams
from src.orbits import OrbitTrace


@pytest.fixture
def intermittent():
    return IntermittentCircleMap()


@pytest.fixture
def doubling():
    return DoublingBaselineMap()


@pytest.fixture
def default_params():
    return HyperbolicParams(sigma=math.exp(-0.05), delta=1e-4, b=0.25, beta=0.5)


@pytest.fixture
def tie_free_params():
    # 2 / (b c) is not an integer, so recurrence waits never sit on a boundary
    return HyperbolicParams(sigma=0.6, delta=1.0, b=0.45, beta=0.5)


def make_trace(a, r, delta=1.0, x=None):
    a = np.asarray(a, dtype=float)
    r = np.asarray(r, dtype=float)
    if x is None:
        x = np.zeros(a.size + 1)
    return OrbitTrace(x=np.asarray(x, dtype=float), a=a, r=r, delta=delta)
