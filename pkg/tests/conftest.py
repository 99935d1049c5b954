import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    seen = []

    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        seen.append(line)
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok

    yield record
    if not seen:
        _ACCEPTANCE.append((request.node.name, f"{request.node.name} [FAIL] raised before evaluation"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE, key=lambda x: str(x[0])):
        terminalreporter.write_line(line)
