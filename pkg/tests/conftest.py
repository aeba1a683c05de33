import pytest


@pytest.fixture
def acceptance(request):
    """Record one summary line per acceptance criterion; printed at the end of the session."""
    lines = request.config.stash.setdefault(_KEY, [])

    def report(number: int, passed: bool, detail: str) -> bool:
        lines.append((number, f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"))
        return passed

    return report


_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
