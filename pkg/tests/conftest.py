import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line: ``report(number, title, passed, detail)``."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number, title, passed, detail=""):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        lines.append((number, f"criterion {number:>2} {status}  {title}" + (f": {detail}" if detail else "")))
        print(lines[-1][1])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
