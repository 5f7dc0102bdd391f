import numpy as np
import pytest

from margulislab.model import MapDescriptor


@pytest.fixture(scope="session")
def f0():
    """Unperturbed time-one map."""
    return MapDescriptor(family="timechange", epsilon=0.0, shape="cos")


@pytest.fixture(scope="session")
def f_tc05():
    """Time change with roof 1 + 0.05 cos(2 pi t)."""
    return MapDescriptor(family="timechange", epsilon=0.05, shape="cos")


@pytest.fixture(scope="session")
def f_tc02():
    return MapDescriptor(family="timechange", epsilon=0.02, shape="cos")


@pytest.fixture(scope="session")
def f_shear05():
    return MapDescriptor(family="shear", epsilon=0.05, shape="bump")


@pytest.fixture()
def rng():
    return np.random.default_rng(20260810)


def random_points(rng, n, t_margin=0.0):
    """Generic sample points, keeping t away from the seam if asked."""
    pts = rng.random((n, 3))
    if t_margin:
        pts[:, 2] = t_margin + pts[:, 2] * (1.0 - 2.0 * t_margin)
    return pts
