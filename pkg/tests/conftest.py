import pytest

VERDICTS: dict = {}


@pytest.fixture
def verdict():
    """Record ``(criterion, passed, detail)`` for the summary block, then assert."""

    def record(criterion: int, passed: bool, detail: str) -> None:
        prev = VERDICTS.get(criterion)
        VERDICTS[criterion] = (passed, detail) if prev is None else (passed and prev[0], f"{prev[1]}; {detail}")
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}"
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        passed, detail = VERDICTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
