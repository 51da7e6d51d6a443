import pytest

_verdicts = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if the criterion failed."""
    def record(number, ok, detail):
        _verdicts[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_verdicts[number])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_verdicts):
            terminalreporter.write_line(_verdicts[number])
