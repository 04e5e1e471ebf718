import sys

import pytest
from hypothesis import settings

from topoflock import kernels as K
from topoflock.mass_coords import MassProfile

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def one():
    return K.constant(1.0)


@pytest.fixture
def uniform01():
    return MassProfile.uniform(0.0, 1.0)


@pytest.fixture
def two_block():
    # rho = 1/2 on [0, 1] and on [2, 3]
    return MassProfile.from_blocks([(0.0, 1.0, 0.5), (2.0, 3.0, 0.5)])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
