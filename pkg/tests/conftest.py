"""Collects acceptance-criterion verdicts and prints them after the run."""

import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture(scope="session")
def acceptance_results(request):
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
