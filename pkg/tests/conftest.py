import random

import pytest

from ftpmkit import fixtures

# Unit tests use a short stretch so the PIN paths stay fast; the acceptance
# module builds its own full-strength scenario.
FAST_ROUNDS = 64

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def nv_keys():
    return fixtures.fixture_keys()


@pytest.fixture(scope="session")
def scenario(nv_keys):
    return fixtures.build_scenario(random.Random(1234), nv_keys, pin="2468", rounds=FAST_ROUNDS)


@pytest.fixture
def rng(request):
    return random.Random(request.node.name)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
