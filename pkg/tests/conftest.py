import sys
from pathlib import Path

import pytest

# the oracle helpers live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_RESULTS_KEY = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Store a PASS/FAIL line for the acceptance summary."""
    results = request.config.stash.setdefault(_RESULTS_KEY, [])

    def _record(criterion, ok, detail):
        results.append((criterion, "PASS" if ok else "FAIL", detail))
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS_KEY, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {criterion:>2}: {status}  {detail}")
