import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion."""

    def record(label, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"{status}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
