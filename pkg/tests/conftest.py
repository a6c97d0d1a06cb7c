"""Collects the one-line verdicts printed by the acceptance gate."""

VERDICTS: dict[int, str] = {}


def record_verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
