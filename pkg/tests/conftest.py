import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("nxb", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("nxb")


@pytest.fixture
def two_state():
    from nxb.device import DeviceModel
    return DeviceModel.evenly_spaced(2, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
