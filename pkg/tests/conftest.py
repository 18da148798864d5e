import pytest

_CRITERIA: dict[int, list[str]] = {}


@pytest.fixture(scope="session")
def criterion_log():
    """Record one status line per acceptance criterion for the summary."""

    def record(number: int, passed: bool | str, detail: str) -> None:
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"criterion {number}: {status} - {detail}"
        _CRITERIA.setdefault(number, []).append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        for line in _CRITERIA[number]:
            terminalreporter.write_line(line)
