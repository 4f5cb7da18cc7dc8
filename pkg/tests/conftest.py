from __future__ import annotations

import time

# Acceptance verdicts, filled by tests/test_acceptance.py and printed at the end of the run.
ACCEPTANCE: list[tuple[str, bool, str]] = []
_STARTED = time.perf_counter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    elapsed = time.perf_counter() - _STARTED
    terminalreporter.write_line(f"{'PASS' if elapsed < 60 else 'FAIL'}  full suite under 60 s  ({elapsed:.1f} s)")
