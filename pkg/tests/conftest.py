import numpy as np
import pytest

from nanotrace.design import NestedDataset, Observation
from nanotrace.mixed import VarianceComponents
from nanotrace.simulate import GroundTruth, generate_dataset


def balanced(I, J, K, n, value=lambda i, j, k, r: 0.0, factors=None):
    obs = []
    for i in range(I):
        for j in range(J):
            for k in range(K):
                for r in range(n):
                    f = factors(i, j, k, r) if factors else {}
                    obs.append(Observation(float(value(i, j, k, r)), str(i + 1), str(j + 1),
                                           str(k + 1), str(r + 1), f))
    return NestedDataset("fixture", tuple(obs))


@pytest.fixture
def small_truth():
    return GroundTruth(23.4, VarianceComponents(0.3, 0.9, 0.2, 4.0), (6, 4, 3, 5))


@pytest.fixture
def small_dataset(small_truth):
    return generate_dataset(small_truth, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def report(name: str, passed: bool, detail: str) -> None:
    """Record one acceptance criterion result for the terminal summary."""
    ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    print(ACCEPTANCE[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
