from __future__ import annotations

import pytest

CRITERIA = {
    "AC1": "decision rule truth table",
    "AC2": "ident failures fail closed",
    "AC3": "flow table decides once per flow",
    "AC4": "codec round-trip and fuzz",
    "AC5": "permission bounded model check",
    "AC6": "mask arithmetic, all pairs",
    "AC7": "scheduler node exclusivity",
    "AC8": "GPU hygiene and epilog fault",
    "AC9": "newgrp opt-in end to end",
    "AC10": "fault-injection sensitivity",
    "AC11": "trace determinism",
}

_outcomes: dict[str, list[tuple[str, str, float]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id): acceptance criterion this test covers")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    item.user_properties.append(("acceptance", marker.args[0]))


@pytest.hookimpl(trylast=True)
def pytest_runtest_logreport(report):
    ac = dict(report.user_properties).get("acceptance")
    if ac is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(ac, []).append((report.nodeid, report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for ac, title in CRITERIA.items():
        runs = _outcomes.get(ac)
        if not runs:
            tr.write_line(f"{ac:<5} NOT RUN  {title}")
            continue
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        secs = sum(d for *_, d in runs)
        tr.write_line(f"{ac:<5} {'PASS' if ok else 'FAIL':<8} {title}  ({secs:.1f}s)")
