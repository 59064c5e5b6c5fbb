import pytest

ACCEPTANCE_LINES: dict[tuple[int, str], str] = {}


@pytest.fixture
def report():
    """Record one acceptance line per criterion; printed in the terminal summary."""
    def _report(num: int, passed: bool, detail: str, label: str = "") -> None:
        name = f"{num}{label}"
        line = f"criterion {name:>3s}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[num, label] = line
        print(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
