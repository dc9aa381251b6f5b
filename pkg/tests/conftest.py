import pytest

_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running end-to-end acceptance criteria")


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line; the lines are echoed in the terminal summary."""
    def record(name: str, ok: bool, detail: str = "", skipped: bool = False) -> bool:
        status = "SKIP" if skipped else ("PASS" if ok else "FAIL")
        line = f"{status}  {name}" + (f"  [{detail}]" if detail else "")
        _LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
