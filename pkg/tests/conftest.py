"""Shared test hooks: print one PASS/FAIL line per acceptance criterion."""

from __future__ import annotations

import re

_ACCEPTANCE_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_results: dict[int, list[tuple[str, bool]]] = {}


def pytest_runtest_logreport(report):
    match = _ACCEPTANCE_PATTERN.search(report.nodeid)
    if not match or report.when != "call":
        return
    number = int(match.group(1))
    name = report.nodeid.split("::")[-1]
    _results.setdefault(number, []).append((name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entries = _results[number]
        passed = all(ok for _, ok in entries)
        checks = f" ({len(entries)} checks)" if len(entries) > 1 else ""
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}{checks}"
        if not passed:
            failing = ", ".join(name for name, ok in entries if not ok)
            line += f" — failing: {failing}"
        terminalreporter.write_line(line)
