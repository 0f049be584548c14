import re

import pytest

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


_LINES = {}


def pytest_configure(config):
    config.stash[ACCEPTANCE] = _LINES


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE]

    def record(num, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {num} ({name}): {detail}"
        lines[num] = line
        print(line)
        return passed

    return record


def pytest_runtest_logreport(report):
    # a criterion test that errors before recording still gets a FAIL line
    m = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if m and report.failed:
        num = int(m.group(1))
        _LINES.setdefault(num, f"FAIL criterion {num}: errored ({report.when})")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[ACCEPTANCE]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(lines.get(num, f"---- criterion {num}: not run"))
