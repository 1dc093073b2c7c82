import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and report.passed:
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "notes": []})
    detail = dict(item.user_properties).get("detail")
    note = f"{item.name}: {detail}" if detail else item.name
    if not report.passed:
        entry["ok"] = False
        entry["notes"].append(f"{note} [{report.outcome} in {report.when}]")
    elif report.when == "call":
        entry["notes"].append(note)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  " + "; ".join(entry["notes"]))
