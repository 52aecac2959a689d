import numpy as np
import pytest

# acceptance test results, echoed after the run summary so the pass/fail
# line per criterion is visible without -s
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def record_criterion(num: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((num, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {num:2d}: {detail}")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
