import pytest

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    def record(key, ok, detail):
        ACCEPTANCE[key] = f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int(k[0]), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
