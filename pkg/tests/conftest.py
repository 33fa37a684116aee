import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("artifit", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("artifit")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """``record(passed, detail)`` prints one pass/fail line for an acceptance criterion."""
    number = request.node.get_closest_marker("criterion").args[0]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(passed: bool, detail: str) -> bool:
        line = f"[acceptance {number:2d}] {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
