import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        CRITERIA[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
