"""Per-criterion pass/fail summary for the acceptance suite.

Acceptance tests carry ``@pytest.mark.criterion(n, "title")`` and may attach a
one-line ``detail`` through ``record_property``.  A criterion passes only if
every test carrying its number passed.
"""

import pytest

_outcomes: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _outcomes.setdefault(number, {"title": title, "passed": True, "details": []})
    if not report.passed:
        entry["passed"] = False
    for key, value in item.user_properties:
        if key == "detail" and value not in entry["details"]:
            entry["details"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        verdict = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
