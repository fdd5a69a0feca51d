import pytest

_LINES = pytest.StashKey()


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion plus raw detail lines."""

    def __init__(self, lines):
        self.lines = lines

    def __call__(self, label, ok, detail=""):
        self.lines.append(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
        return ok

    def log(self, text):
        self.lines.append("    " + text)


@pytest.fixture
def verdict(request):
    return Verdicts(request.config.stash.setdefault(_LINES, []))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
