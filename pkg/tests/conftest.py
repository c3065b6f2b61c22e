import numpy as np
import pytest

from adafuse.models import ClassifierBank
from adafuse.policy import AdaFuseNetwork, PolicyNetwork

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> None:
    """Record one acceptance verdict; all verdicts are printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"[{criterion}] {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def bank():
    return ClassifierBank(np.random.default_rng(3))


@pytest.fixture
def net(bank):
    return AdaFuseNetwork(bank, PolicyNetwork(np.random.default_rng(4)))


class Rec:
    """Minimal record: just the three raw modalities and an id."""

    def __init__(self, rng, id="r0"):
        self.id = id
        self.f_A = rng.standard_normal(512)
        self.f_B = rng.standard_normal(17)
        self.f_C = rng.standard_normal(768)


@pytest.fixture
def record(rng):
    return Rec(rng)
