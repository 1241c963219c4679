import pytest

from aligncons.synthdata import generate_corpus
from helpers import CRITERIA_LINES, TOY_SPEC


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_corpus(TOY_SPEC)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
