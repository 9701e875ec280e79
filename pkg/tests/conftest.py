import numpy as np
import pytest

from htvgnn import numcore as nc


@pytest.fixture(autouse=True)
def _clean_tape():
    nc.get_tape().clear()
    yield
    nc.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS, report_lines

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in report_lines():
            terminalreporter.write_line(line)
