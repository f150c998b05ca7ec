import pytest

_LINES_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion_report(request):
    """``report(n, ok, detail)`` records one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(_LINES_KEY, {})

    def report(n: int, ok: bool, detail: str) -> bool:
        lines[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
