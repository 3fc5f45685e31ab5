import pytest

_LINES = []


@pytest.fixture(scope="session")
def report():
    """report(n, ok, detail) records one pass/fail line for the terminal summary."""
    def add(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append((n, line))
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
