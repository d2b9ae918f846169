import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=1000,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_AC = re.compile(r"test_acceptance\.py::test_ac(\d+)_")
_outcomes: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = _AC.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        prev = _outcomes.get(n)
        if prev in (None, "passed"):
            _outcomes[n] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from test_acceptance import CRITERIA
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status = {"passed": "PASS", None: "NOT RUN"}.get(_outcomes.get(n), "FAIL")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {CRITERIA[n]}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
