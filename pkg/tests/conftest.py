import pytest

_results: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    _results[number] = ("PASS" if report.passed else "FAIL", detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, detail, secs = _results[number]
        terminalreporter.write_line(f"criterion {number}: {status} ({secs:.2f}s) {detail}")
