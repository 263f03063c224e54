import numpy as np
import pytest

from jmap.data.phantom import build_template


@pytest.fixture(scope="session")
def template():
    return build_template((32, 32, 32))


@pytest.fixture(scope="session")
def small_template():
    return build_template((16, 16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
