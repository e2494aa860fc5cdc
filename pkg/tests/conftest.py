import string

import pytest

_LINES: dict[str, str] = {}


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion.

    Usage: ``criterion("3", passed, "detail")``; the line is printed in the
    terminal summary in criterion order.
    """
    def record(key: str, passed: bool, detail: str) -> bool:
        _LINES[key] = f"criterion {key:<3} {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES, key=lambda k: (int(k.rstrip(string.ascii_lowercase)), k)):
        terminalreporter.write_line(_LINES[key])
