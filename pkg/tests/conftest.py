from contextlib import contextmanager

import pytest

_VERDICTS: list[tuple[int, str, bool, str]] = []


@contextmanager
def _criterion(number: int, title: str):
    notes: dict = {}
    try:
        yield notes
    except BaseException:
        _VERDICTS.append((number, title, False, notes.get("detail", "")))
        raise
    _VERDICTS.append((number, title, True, notes.get("detail", "")))


@pytest.fixture
def criterion():
    """Context manager that records a PASS/FAIL line for one acceptance criterion."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_VERDICTS):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
