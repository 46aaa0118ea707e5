import pytest

_CRITERIA = {}


@pytest.fixture
def report():
    """Record one acceptance line; all lines are echoed in the terminal summary."""

    def _report(number: int, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
