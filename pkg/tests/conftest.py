import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call as ``criterion(number, passed, detail)``; a test that errors before
    recording is listed as failed.
    """
    recorded = []

    def record(number, passed, detail=""):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_LINES].append((number, line))
        recorded.append(number)
        return passed

    yield record
    if not recorded:
        request.config.stash[_LINES].append((request.node.name, f"{request.node.name}: FAIL  (no result recorded)"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: (isinstance(x[0], str), x[0])):
        terminalreporter.write_line(line)
