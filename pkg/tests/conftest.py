"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str, seconds: float) -> str:
    line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'} {title}: {detail} ({seconds:.1f} s)"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
