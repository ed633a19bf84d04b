import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_registry import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (int(k.rstrip("ab")), k)):
        status, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
