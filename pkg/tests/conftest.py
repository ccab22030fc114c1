import pytest

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "" if report.passed else str(report.longrepr.reprcrash.message if hasattr(
            report.longrepr, "reprcrash") else report.longrepr).splitlines()[0]
        CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, status, detail = CRITERIA[number]
        line = f"{status} criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
