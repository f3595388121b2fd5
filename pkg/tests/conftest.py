import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def verdict(request):
    """Record ``(criterion, passed, detail)`` and fail the test when not passed."""
    lines = request.config.stash[_LINES_KEY]

    def record(label: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        lines.append((label, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
