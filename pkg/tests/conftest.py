from __future__ import annotations

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request, capsys):
    """Print and record one PASS/FAIL line, then assert the outcome."""

    def _report(n: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {title}" + (f"  [{detail}]" if detail else "")
        request.config.stash.setdefault(_LINES, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
