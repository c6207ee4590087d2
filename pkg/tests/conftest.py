import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sedjoco.core import random_pd_problem

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# criterion number -> (title, passed, detail); filled by test_acceptance.py
_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Record the verdict of one acceptance criterion for the final summary."""

    def _record(number, title, passed, detail=""):
        _CRITERIA[number] = (title, bool(passed), detail)
        status = "PASS" if passed else "FAIL"
        print(f"[criterion {number}] {status}: {title} ({detail})")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {number}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_problem():
    return random_pd_problem(2, 2, np.random.default_rng(11))
