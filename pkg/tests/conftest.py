"""Shared pytest plumbing.

The acceptance tests append one verdict line per criterion to
ACCEPTANCE_LINES; the terminal-summary hook replays them at the end of
the run so the final report always shows every criterion's outcome.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
