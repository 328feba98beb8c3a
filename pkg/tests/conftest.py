import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by test_acceptance.verdict(); echoed once more at the end of the session
ACCEPTANCE_LINES = []
TERMINAL = None


def pytest_sessionstart(session):
    global TERMINAL
    TERMINAL = session.config.pluginmanager.get_plugin("terminalreporter")


def report(line):
    """Write a line past output capture, so it shows while the session runs."""
    ACCEPTANCE_LINES.append(line)
    if TERMINAL is not None:
        TERMINAL.write_line("")
        TERMINAL.write_line(line)
        TERMINAL.flush()
    else:
        print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
