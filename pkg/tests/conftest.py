import pytest

_OUTCOMES: dict[int, list[tuple[str, bool]]] = {}
_TITLES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance check reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _TITLES[number] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(number, []).append((item.name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        checks = _OUTCOMES[number]
        failed = [name for name, ok in checks if not ok]
        verdict = "FAIL" if failed else "PASS"
        detail = f" (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {number}: {verdict} {_TITLES[number]}{detail}")
