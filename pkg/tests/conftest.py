import pytest

_results: list[tuple[int, str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        verdict = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _results.append((number, title, verdict, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, duration in sorted(_results):
        terminalreporter.write_line(f"criterion {number:2d}  {verdict}  {title}  ({duration:.1f} s)")
