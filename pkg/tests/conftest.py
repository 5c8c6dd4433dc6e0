"""Acceptance bookkeeping: one PASS/FAIL line per numbered criterion at the end of the run."""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "passed": True, "ran": False, "detail": ""})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["passed"] = False
        entry["detail"] = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else str(report.longrepr)[:200]
    if report.skipped and report.when in ("setup", "call"):
        entry["passed"] = False
        entry["detail"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_results):
        e = _results[number]
        ok = e["passed"] and e["ran"]
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {e['title']}"
        if not ok and e["detail"]:
            line += f"  ({e['detail'].splitlines()[0][:160]})"
        tr.write_line(line)
