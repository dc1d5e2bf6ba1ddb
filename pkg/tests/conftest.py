import pytest


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="also run tests marked slow")


def pytest_configure(config):
    config._verdicts = []


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow; pass --run-slow to include")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line; they are echoed live and again in the summary."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        request.config._verdicts.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    if config._verdicts:
        terminalreporter.section("acceptance criteria")
        for line in config._verdicts:
            terminalreporter.write_line(line)
