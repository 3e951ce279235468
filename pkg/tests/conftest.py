import pytest

# criterion number -> list of (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, list] = {}
TITLES: dict[int, str] = {}
# free-form diagnostic lines printed after the criteria
REPORTS: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        TITLES[number] = title
        ACCEPTANCE.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)
    return record


@pytest.fixture
def report():
    return REPORTS.append


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not REPORTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        rows = ACCEPTANCE[n]
        ok = all(p for p, _ in rows)
        detail = "; ".join(d for _, d in rows if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {TITLES[n]}  [{detail}]")
    for line in REPORTS:
        terminalreporter.write_line(line)
