import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one ``PASS``/``FAIL`` line for an acceptance criterion, then return the verdict."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
        print(ACCEPTANCE[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
