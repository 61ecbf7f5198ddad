import pytest

_GATE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_GATE] = []


@pytest.fixture(scope="session")
def gate(request):
    """report(criterion, ok, detail): one summary line per acceptance criterion."""
    lines = request.config.stash[_GATE]

    def report(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_GATE, [])
    if lines:
        terminalreporter.section("acceptance gate")
        for line in sorted(lines):
            terminalreporter.write_line(line)
