"""Shared fixtures and the acceptance-criterion result banner.

Acceptance tests register their criterion outcome through the
``acceptance`` fixture; after the run a one-line PASS/FAIL summary per
criterion is printed in the terminal summary.
"""
from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

_ACCEPTANCE_RESULTS: dict[int, tuple[str, bool]] = {}


class AcceptanceRecorder:
    def __init__(self, number: int, name: str):
        self.number = number
        self.name = name
        _ACCEPTANCE_RESULTS[number] = (name, False)

    def passed(self) -> None:
        _ACCEPTANCE_RESULTS[self.number] = (self.name, True)


@pytest.fixture
def acceptance(request):
    """Factory: acceptance(n, name) -> recorder; call .passed() at the end."""
    return AcceptanceRecorder


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_RESULTS):
        name, ok = _ACCEPTANCE_RESULTS[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {name}: {status}")
