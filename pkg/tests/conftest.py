import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
        lines.append((number, line))
        print(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
