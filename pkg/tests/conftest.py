from __future__ import annotations

from importlib.resources import files

import pytest

from deeplog.parser import parse_model


def data_text(name: str) -> str:
    return files("deeplog").joinpath("data", name).read_text()


@pytest.fixture(scope="session")
def alarm_model():
    return parse_model(data_text("alarm.dlm"))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
