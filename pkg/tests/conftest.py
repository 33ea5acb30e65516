import random

import pytest

from secureknn import paillier
from secureknn.primitives import InlineC2, Observer

import helpers

KEY_BITS = 512


@pytest.fixture(scope="session")
def keypair():
    return paillier.generate_keypair(KEY_BITS, random.SystemRandom())


@pytest.fixture(scope="session")
def pk(keypair):
    return keypair[0]


@pytest.fixture(scope="session")
def sk(keypair):
    return keypair[1]


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


@pytest.fixture
def observer():
    return Observer()


@pytest.fixture
def chan(sk, rng, observer):
    """Synchronous in-process channel to a key-cloud responder."""
    return InlineC2(sk, rng, observer)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if helpers.ACCEPTANCE_REPORT:
        terminalreporter.section("acceptance criteria")
        for criterion, status in helpers.ACCEPTANCE_REPORT:
            terminalreporter.write_line(f"[{status}] {criterion}")
