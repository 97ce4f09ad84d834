import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion lines recorded by test_acceptance, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
