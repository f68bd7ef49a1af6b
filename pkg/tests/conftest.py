import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, one line per criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[{status}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")


def pytest_runtest_logreport(report):
    # a criterion whose test errored before recording still gets a line
    if report.when == "call" and report.failed and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        if name.startswith("test_criterion_"):
            n = int(name.split("_")[2])
            if n not in ACCEPTANCE_LINES:
                ACCEPTANCE_LINES[n] = f"[FAIL] criterion {n:2d}: {name} raised before completing"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
