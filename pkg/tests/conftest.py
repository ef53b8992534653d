from __future__ import annotations

import re

CRITERIA = {
    1: "environment determinism and horizon",
    2: "evaluation-goal satisfiability",
    3: "oracle end-to-end success after finetune",
    4: "prompt template fidelity",
    5: "parser robustness",
    6: "metric oracles",
    7: "exploration statistics",
    8: "schedule conformance",
    9: "resumability",
    10: "confusion tooling",
}

_outcomes: dict[int, list[bool]] = {}
_CRIT = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _CRIT.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed or report.skipped:
        _outcomes.setdefault(int(m.group(1)), []).append(report.passed and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}  {status:<7} {title}")
