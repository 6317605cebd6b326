import pytest

from numerla import env as E
from numerla import policy as P
from numerla.cola import build_sample_bank

from helpers import ACCEPTANCE

TEST_SIM = E.SimConfig(light_cycle=(5, 40, 15))


@pytest.fixture(scope="session")
def meta():
    """A briefly trained policy shared by the slower tests."""
    return P.train_meta(P.TrainConfig(episodes=400, lr=0.003, seed=0), TEST_SIM)


@pytest.fixture(scope="session")
def small_bank(meta):
    return build_sample_bank(meta, (E.COMPLIANT, E.JAYWALK), 12, 10, 5, TEST_SIM)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
