import pytest

from _support import build_admissions_source, build_demo

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def demo(tmp_path_factory):
    return build_demo(tmp_path_factory.mktemp("demo"), seed=42, n_patients=50)


@pytest.fixture(scope="session")
def adm_env(tmp_path_factory):
    return build_admissions_source(tmp_path_factory.mktemp("adm"))


@pytest.fixture
def report():
    """Records a pass/fail line for the acceptance summary."""

    def _report(line: str):
        ACCEPTANCE_LINES.append(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
