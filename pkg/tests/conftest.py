import pytest

CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict, then assert it."""

    def check(number, ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
