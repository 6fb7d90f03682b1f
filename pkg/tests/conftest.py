"""Shared pytest plumbing.

The acceptance module records one verdict line per criterion in
``acceptance_lines``; the terminal-summary hook echoes them in a block at
the end of the run so the verdicts survive pytest's own output folding.
"""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
