"""Collects acceptance verdicts and prints them at the end of the run."""

import pytest

_VERDICTS: list[str] = []


class Verdicts:
    def record(self, criterion: str, passed: bool, detail: str = "") -> bool:
        _VERDICTS.append(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}".rstrip())
        return passed


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
