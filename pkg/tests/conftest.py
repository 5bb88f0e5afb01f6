import os

# 1024-bit Paillier keys keep the suite fast; production code defaults to 2048.
os.environ.setdefault("LNGATE_TEST_PAILLIER", "1")

import pytest  # noqa: E402

from lngate.chain_sim import COIN  # noqa: E402
from lngate.nodes import SimConfig, Simulation  # noqa: E402
from lngate.threshold_ecdsa import keygen  # noqa: E402

TEST_BITS = 1024


@pytest.fixture(scope="session")
def joint_keys():
    """Server and client views from the seeded keygen (seed pair 42/43)."""
    return keygen(42, 43, paillier_bits=TEST_BITS, allow_test_size=True)


def make_sim(seed=1, fee_ppm=100_000, **kw) -> Simulation:
    sim = Simulation(SimConfig(seed=seed, fee_ppm=fee_ppm, paillier_bits=TEST_BITS, allow_test_size=True, **kw))
    sim.add_destination("dest")
    return sim


def open_sim(seed=1, fee_ppm=100_000, capacity=10 * COIN, **kw) -> Simulation:
    sim = make_sim(seed, fee_ppm, **kw)
    sim.fund_iot(capacity + 222)
    sim.open_channel(capacity)
    return sim


# One line per acceptance criterion, echoed again in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    def report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
