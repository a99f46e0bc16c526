import pytest

# (number, passed, detail, seconds) appended by the acceptance tests
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail, secs in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  ({secs:.1f} s)  {detail}")


@pytest.fixture
def record_criterion():
    def record(num, ok, detail, secs):
        ACCEPTANCE_RESULTS.append((num, bool(ok), detail, secs))
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({secs:.1f} s) {detail}")
    return record
