import pytest

# acceptance criteria append (number, passed, detail) here; printed in the summary
ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    def record(number, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
