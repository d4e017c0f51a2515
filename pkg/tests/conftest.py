"""Shared pytest wiring: one summary line per numbered acceptance check."""

import pytest

_acceptance_results = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(n): numbered end-to-end acceptance check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when == "teardown":
        return
    n = marker.args[0]
    if rep.failed or rep.skipped:
        _acceptance_results[n] = False
    elif rep.when == "call" and rep.passed:
        _acceptance_results.setdefault(n, True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    for n in sorted(_acceptance_results):
        verdict = "PASS" if _acceptance_results[n] else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {n}: {verdict}")
