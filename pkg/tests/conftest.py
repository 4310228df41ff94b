import numpy as np
import pytest

from visfit.heatmaps import PerspectiveCamera
from visfit.mini_model import make_mini_model
from visfit.prior import make_synthetic_prior


@pytest.fixture(scope="session")
def mini():
    return make_mini_model()


@pytest.fixture(scope="session")
def prior(mini):
    return make_synthetic_prior(3 * (mini.n_kin - 1))


@pytest.fixture(scope="session")
def camera():
    return PerspectiveCamera(500.0, 500.0, 256.0, 256.0, 512, 512)


def random_pose(rng, n_kin, scale=0.35, upright=True):
    theta = rng.normal(0.0, scale, (n_kin, 3))
    if upright:
        theta[0] = np.array([np.pi, 0.0, 0.0]) + rng.normal(0.0, 0.3, 3)
    return theta


# one line per acceptance criterion, filled by test_acceptance and echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
