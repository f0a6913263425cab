import pytest

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def record_criterion(request):
    """Store a one-line PASS/FAIL verdict for an acceptance criterion."""
    lines = request.config.stash[_LINES]

    def record(number: int, passed: bool, detail: str = ""):
        lines[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
