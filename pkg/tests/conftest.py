"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import defaultdict

import pytest

_outcomes: dict[int, list[bool]] = defaultdict(list)
_titles: dict[int, str] = {}
_notes: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test checks")


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return mark.args if mark else None


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion line of the current test."""
    args = _criterion(request.node)

    def add(text: str) -> None:
        if args:
            _notes[args[0]].append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    args = _criterion(item)
    if not args:
        return
    number, title = args
    _titles[number] = title
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[number].append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        status = "PASS" if all(_outcomes[number]) else "FAIL"
        line = f"criterion {number:>2}: {status}  {_titles[number]}"
        if _notes[number]:
            line += "  [" + "; ".join(_notes[number]) + "]"
        terminalreporter.write_line(line)
