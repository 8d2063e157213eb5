import pytest

from cnmcost.target import preset


@pytest.fixture(scope="session")
def upmem():
    return preset("upmem")


@pytest.fixture(scope="session")
def hbm():
    return preset("hbmpim")


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
