import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test still asserts on its own."""
    lines = request.config.stash[_LINES]

    def record(number: int, ok: bool, detail: str) -> bool:
        lines.append((number, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config.stash.get(_LINES, []))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in lines:
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
