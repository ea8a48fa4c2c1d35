import sys

import numpy as np
import pytest

from hyperhawkes import hawkes, seqdata


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """Ten short synthetic sequences with a 3-dim descriptor."""
    records, truth, _ = hawkes.synthetic_corpus(10, 3, 10.0, seed=5)
    return records, truth


def make_seq(ts, sid="s", span=(0.0, 1.0)):
    return seqdata.EventSequence(sid, np.asarray(ts, dtype=float), sid, span)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
        if acceptance.DETAILS:
            terminalreporter.section("directional experiments per seed")
            for line in acceptance.DETAILS:
                terminalreporter.write_line(line)
