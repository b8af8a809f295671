import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gridgemm import init, shutdown  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def session_factory():
    made = []

    def make(workers, **kw):
        s = init(workers, **kw)
        made.append(s)
        return s

    yield make
    for s in made:
        shutdown(s)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
