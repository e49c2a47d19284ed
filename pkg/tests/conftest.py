import pytest

_RESULTS = {}


def pytest_addoption(parser):
    parser.addoption("--full-scale", action="store_true", default=False,
                     help="run the closed-loop acceptance check with the full 1000-trajectory dataset")


@pytest.fixture(scope="session")
def full_scale(request):
    return request.config.getoption("--full-scale")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    k = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _RESULTS[k] = (status, detail or item.name)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        status, detail = _RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}")
