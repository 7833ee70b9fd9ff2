"""Shared pytest hooks: acceptance criteria report one line each in the summary."""

ACCEPTANCE_RESULTS = {}


def record(number, title, passed, detail=""):
    """Store a criterion outcome; the terminal summary prints them in order."""
    ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} [{status}] {title}: {detail}")
