"""Shared pytest plumbing: the acceptance-gate result board.

Gate tests record one line each; printing them from the terminal-summary
hook makes the pass/fail board visible even when per-test stdout capture
swallows ordinary prints.
"""

GATE_LINES: list[str] = []


def record_gate(line: str) -> None:
    GATE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if GATE_LINES:
        terminalreporter.section("acceptance gates")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
