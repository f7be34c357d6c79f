"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""

import pytest

_LINES: list[tuple[str, bool, str]] = []


class CriterionLog:
    def record(self, name: str, ok: bool, detail: str) -> bool:
        _LINES.append((name, bool(ok), detail))
        return bool(ok)


@pytest.fixture
def criteria() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
