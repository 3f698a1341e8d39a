import sys
import math

import numpy as np
import pytest

from avek import radon
from avek.opsys import BlockSystem, MatrixBlock, Space
from avek.problems import standard_problem


def scalar_system(coefs, data, deltas=None):
    """System of scalar equations ``a_i x = y_i`` on ``R^1``."""
    X = Space((1,), name="X")
    blocks = [MatrixBlock(np.array([[float(a)]]), X, Space((1,), name=f"Y{i}"),
                          norm_bound=abs(float(a))) for i, a in enumerate(coefs)]
    return BlockSystem(blocks, [np.array([float(y)]) for y in data], deltas)


def full_circle(n_x, n_r, n_phi, n_blocks, **kw):
    g = radon.DetectorGeometry(n_x=n_x, n_r=n_r, n_phi=n_phi, **kw)
    return radon.partition_boundary(g, (0.0, 2 * math.pi), n_blocks)


@pytest.fixture
def std():
    return standard_problem()


@pytest.fixture(scope="session")
def small_geom():
    return full_circle(32, 32, 16, 4)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
