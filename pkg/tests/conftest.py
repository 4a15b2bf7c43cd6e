import numpy as np
import pytest

from mpsbatch import random_mps
from mpsbatch.mpsfile import save_mps

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion(request):
    """``record(n, ok, detail)`` prints a pass/fail line now and in the summary."""
    store = request.config.stash[_CRITERIA]

    def record(n: int, ok: bool, detail: str) -> bool:
        store[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


@pytest.fixture(scope="session")
def small_mps():
    return random_mps(6, 8, 3, seed=3)


@pytest.fixture(scope="session")
def small_mps_file(small_mps, tmp_path_factory):
    path = tmp_path_factory.mktemp("mps") / "small.mps"
    save_mps(small_mps, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
