import pytest

from jicgsim.calibration import calibrate
from jicgsim.campaign import AttackBench


@pytest.fixture(scope="session")
def bench():
    return AttackBench()


@pytest.fixture(scope="session")
def calibration(bench):
    return calibrate(bench)


@pytest.fixture(scope="session")
def thresholds(calibration):
    return calibration.thresholds


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k} {'PASS' if ok else 'FAIL'}: {title}"
                                    + (f" -- {detail}" if detail else ""))
