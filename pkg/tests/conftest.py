"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""

import pytest

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or report.failed:
        detail = dict(item.user_properties).get("detail", "")
        prev = _CRITERIA.get(name)
        status = "FAIL" if report.failed or (prev and prev[0] == "FAIL") else "PASS"
        _CRITERIA[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s[2:])):
        status, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{name} {status}  {detail}")
