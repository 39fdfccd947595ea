import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the assertion is left to the caller."""
    def record(number: int, title: str, ok: bool, detail: str = ""):
        _VERDICTS[number] = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}" + (f": {detail}" if detail else "")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[n])
