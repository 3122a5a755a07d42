import pytest

from helpers import ACCEPTANCE_LINES, make_desk


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk():
    """3 blocks, d_model 64, 256 FFN rows per block, 500-word vocabulary from the bundled corpus."""
    return make_desk(500)


@pytest.fixture(scope="session")
def desk200():
    return make_desk(200)
