import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from premap.geometry import Box  # noqa: E402
from premap.model import load_network  # noqa: E402

from _nets import random_net  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"

settings.register_profile("premap", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("premap")


@pytest.fixture(scope="session")
def parking_net():
    return load_network(FIXTURES / "parking.json")


@pytest.fixture(scope="session")
def parking_box():
    return Box([0.0, 0.0], [2.0, 2.0])


@pytest.fixture
def small_net():
    return random_net([2, 10, 4], 7)


@pytest.fixture
def deep_net():
    return random_net([3, 12, 10, 3], 11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    def _report(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
