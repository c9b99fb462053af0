"""Collects one verdict line per acceptance criterion and prints them at the end."""

CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
