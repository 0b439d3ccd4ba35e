import pytest

# one line per acceptance criterion, echoed again in the terminal summary
CRITERIA_LINES = []


@pytest.fixture
def report_criterion(capsys):
    def report(number, title, passed, detail=""):
        line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
        CRITERIA_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
