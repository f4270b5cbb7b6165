import os
import re
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> {test node name: passed}
_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    m = re.match(r"test_criterion_(\d+)", name)
    if "test_acceptance.py" not in report.nodeid or m is None:
        return
    if report.when == "call" or report.outcome != "passed":
        tests = _CRITERIA.setdefault(int(m.group(1)), {})
        tests[name] = tests.get(name, True) and report.outcome == "passed"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        tests = _CRITERIA[num]
        failed = [n for n, ok in tests.items() if not ok]
        status = "FAIL" if failed else "PASS"
        detail = f"failed: {', '.join(failed)}" if failed else f"{len(tests)} test(s)"
        terminalreporter.write_line(f"criterion {num}: {status} ({detail})")
