import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA: list[str] = []


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    """Remember a criterion verdict; the lines are printed at the end of the run."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    CRITERIA.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
