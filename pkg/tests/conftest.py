import numpy as np
import pytest

from pcmcnet.core import with_diagonal


def random_rates(rng, n, low=0.05, high=3.0):
    Q = rng.uniform(low, high, size=(n, n))
    return with_diagonal(Q)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; it is echoed live and repeated in the terminal summary."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, title, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  ({detail})"
        request.config.stash[_ACCEPTANCE].append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
