import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line (plus optional notes) for the end-of-session summary."""

    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {label}: {detail}"
        VERDICTS.append(line)
        print(line)
        return passed

    def note(text: str) -> None:
        VERDICTS.append(f"     info: {text}")
        print(text)

    record.note = note
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
