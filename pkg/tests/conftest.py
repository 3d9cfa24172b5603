"""Prints one PASS/FAIL line per acceptance criterion after the run.

The acceptance tests are ordinary pytest tests; this hook just surfaces
their outcomes as a compact checklist that survives output capturing.
"""

_RESULTS = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance.py::test_criterion_" in report.nodeid:
        _RESULTS[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for nodeid in sorted(_RESULTS):
        short = nodeid.split("::")[-1].removeprefix("test_criterion_")
        num, _, label = short.partition("_")
        status = "PASS" if _RESULTS[nodeid] == "passed" else "FAIL"
        terminalreporter.write_line(
            f"criterion {int(num):2d} ({label.replace('_', ' ')}): {status}")
