import pytest

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
