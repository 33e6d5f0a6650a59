import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = _CRITERION.search(item.name)
    if not m or report.when == "teardown" and report.passed:
        return
    n = int(m.group(1))
    doc = (item.function.__doc__ or "").strip().splitlines()
    entry = _results.setdefault(n, {"title": doc[0] if doc else item.name, "ok": True, "ran": False})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        status = "PASS" if r["ok"] and r["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {r['title']}")
