import pytest

VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL/SKIP line for an acceptance criterion and return the status."""

    def record(criterion: str, ok, detail: str = "") -> str:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{status} {criterion}" + (f" | {detail}" if detail else "")
        VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return status

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
