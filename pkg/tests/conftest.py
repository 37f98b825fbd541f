import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_RESULTS: dict = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, name, detail)`` marks it pending
    and the test outcome decides pass/fail."""

    def record(number, name, detail=""):
        _RESULTS[request.node.nodeid] = [number, name, detail]

    def update(detail):
        if request.node.nodeid in _RESULTS:
            _RESULTS[request.node.nodeid][2] = detail

    record.detail = update
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and item.nodeid in _RESULTS:
        _RESULTS[item.nodeid].append("PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, detail, *status in sorted(_RESULTS.values(), key=lambda r: r[0]):
        state = status[0] if status else "FAIL"
        terminalreporter.write_line(f"[{state}] criterion {number:>2}: {name}" + (f"  ({detail})" if detail else ""))
