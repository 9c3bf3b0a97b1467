"""Collects one verdict line per acceptance criterion and prints them at the end."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict(request):
    marker = request.node.get_closest_marker("acceptance")
    number = marker.args[0] if marker else request.node.name

    def record(ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call" and report.failed and marker.args[0] not in _VERDICTS:
        # crashed before recording a verdict
        _VERDICTS[marker.args[0]] = f"FAIL criterion {marker.args[0]:>2}: {call.excinfo.typename}: {call.excinfo.value}"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
