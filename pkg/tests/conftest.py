import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Records one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        lines[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
