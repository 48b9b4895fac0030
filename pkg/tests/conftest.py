import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion verdicts after the test summary."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERION_LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
