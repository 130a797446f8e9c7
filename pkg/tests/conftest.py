"""Shared pytest hooks: the acceptance suite's one-line verdicts go into the terminal summary."""
import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record ``(name, passed, detail, seconds)`` for the acceptance summary."""
    def record(name: str, passed: bool, detail: str, seconds: float):
        line = f"{'PASS' if passed else 'FAIL'}  {name:<26} {seconds:8.2f}s  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
