import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def report():
    """Record one ``CRITERION <n>: PASS|FAIL ...`` line; shown in the terminal summary."""
    def add(n, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"CRITERION {n}: {status} {detail}"
        _CRITERIA.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
