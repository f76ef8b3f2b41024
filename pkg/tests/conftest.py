import pytest

_LINES: list[str] = []


class AcceptanceLog:
    """Collects one pass/fail line per acceptance check."""

    def record(self, criterion: int, label: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {criterion}: {label}"
        if detail:
            line += f" ({detail})"
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
