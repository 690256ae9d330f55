import pytest

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


class AcceptanceLog:
    def __init__(self, store: dict):
        self.store = store

    def record(self, number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        self.store[number] = line
        print(line)


@pytest.fixture
def acceptance(request) -> AcceptanceLog:
    return AcceptanceLog(request.config.stash.setdefault(_ACCEPTANCE_KEY, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
