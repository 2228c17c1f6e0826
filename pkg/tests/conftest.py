import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "gradient correctness",
    2: "loss identities",
    3: "architecture contract",
    4: "overfit on 8 images",
    5: "cross-palette generalisation",
    6: "metric oracle equivalence",
    7: "watershed oracle equivalence",
    8: "determinism and checkpoint round-trip",
    9: "cross-validation harness",
}
_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            verdict = "NOT RUN"
        elif all(r == "passed" for r in results):
            verdict = "PASS"
        elif any(r == "failed" for r in results):
            verdict = "FAIL"
        else:
            verdict = "SKIPPED"
        terminalreporter.write_line(f"criterion {n} ({name}): {verdict}")
