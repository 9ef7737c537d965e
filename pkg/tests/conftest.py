import os
import sys
import time

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = {}
SESSION_START = time.perf_counter()
SUITE_LIMIT = 600.0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
    total = time.perf_counter() - SESSION_START
    state = "PASS" if total < SUITE_LIMIT else "FAIL"
    terminalreporter.write_line(f"suite time {state}: {total:.0f} s (limit {SUITE_LIMIT:.0f} s)")
