import os

import pytest
from hypothesis import HealthCheck, settings

from ribulk.lattice_potential import green_table

settings.register_profile("ribulk", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ribulk")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def T():
    return green_table(3, 20)


@pytest.fixture(scope="session")
def T40():
    return green_table(3, 40)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
