import pytest

_verdicts = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""

    def record(name: str, ok: bool, detail: str = ""):
        _verdicts.append(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
