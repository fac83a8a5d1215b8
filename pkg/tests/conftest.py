import pytest
import torch

from hear.numerics import set_deterministic

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic(0, threads=1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
