import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record and print one verdict line for an acceptance criterion; ``ok=None`` marks a report."""

    def _report(number, title: str, ok: bool | None, detail: str = "") -> bool | None:
        status = "INFO" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {number}: {status} - {title}"
        if detail:
            line += f" | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
