import pytest

ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def acceptance():
    return record_acceptance
