import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


class ManualClock:
    """Clock that only moves when told to."""

    def __init__(self, start: float = 1_700_000_000.0, step: float = 0.0):
        self.t = start
        self.step = step

    def now(self) -> float:
        value = self.t
        self.t += self.step
        return value

    def advance(self, seconds: float) -> None:
        self.t += seconds


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def fixtures_dir():
    return Path(__file__).parent / "fixtures"


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        text, ok = results[number]
        mark = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {number:>2}: {mark}  {text}")
