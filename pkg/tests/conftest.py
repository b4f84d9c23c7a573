"""Shared pytest hooks.

Acceptance tests record one verdict line per criterion in ``VERDICTS``;
the lines are repeated in the terminal summary so they appear even when
output capture is on.
"""

VERDICTS: list[str] = []


def record_verdict(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} -- {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
