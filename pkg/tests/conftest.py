import numpy as np
import pytest

from delta_uq import checks
from delta_uq.data import DatasetSource, ingest
from delta_uq.nn_core import NetworkConfig, init_params

# lines recorded by tests/test_acceptance.py, printed once at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def tiny():
    """Trained 4-6-3 network (P = 51) on 300 blob points, with dense H and G."""
    return checks.build_fixture()


@pytest.fixture(scope="session")
def small_net():
    """Untrained 3-5-4-3 network (P = 59) on 40 blob points.

    Parameters are jittered so no pre-activation sits exactly on a ReLU kink
    (zero biases behind a dead layer would give exact zeros).
    """
    net = NetworkConfig((3, 5, 4, 3), 0.01)
    data = ingest(DatasetSource("synthetic_blobs", n_classes=3, n_examples=40, dims=3, separation=2.0))
    omega = init_params(net, 3) + 0.1 * np.random.default_rng(3).standard_normal(net.n_params)
    return net, omega, data

