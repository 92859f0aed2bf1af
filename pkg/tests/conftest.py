import warnings

import numpy as np
import pytest

from meshdeform.features import CameraIntrinsics, FeaturePyramid
from meshdeform.mesh import Mesh, load_default_ellipsoid

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tetra():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(v, f)


@pytest.fixture(scope="session")
def ellipsoid():
    return load_default_ellipsoid()


@pytest.fixture
def camera():
    return CameraIntrinsics(f_x=60.0, f_y=60.0, c_x=32.0, c_y=32.0, width=64, height=64)


def random_pyramid(rng, sizes=((16, 16, 3), (8, 8, 2), (4, 4, 2)), scales=(0.25, 0.125, 0.0625), requires_grad=False):
    from meshdeform.autograd import Tensor

    return FeaturePyramid([Tensor(rng.normal(size=s), requires_grad=requires_grad) for s in sizes], list(scales))


@pytest.fixture(autouse=True)
def _quiet_depth_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="points at depth")
        yield
