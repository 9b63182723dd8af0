import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_LINES = pytest.StashKey()


def pytest_configure(config):
    config.stash[_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one 'criterion N: PASS|FAIL ...' line for the terminal summary."""
    def record(number, passed, detail):
        request.config.stash[_LINES].append(
            f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
