import numpy as np
import pytest

from pmmdirect.data import LongitudinalDataset, VisitSchedule
from pmmdirect.simulation import Scenario, generate_dataset

CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str):
    CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])


@pytest.fixture(scope="session")
def pmm_ds():
    return generate_dataset(Scenario.standard("pmm", "diff"), seed=101, replicate=0)


@pytest.fixture(scope="session")
def rd_ds():
    return generate_dataset(Scenario.standard("rd", "diff"), seed=101, replicate=0)


def make_dataset(y, R, arm, X, A=None, adherence=None, labels=None) -> LongitudinalDataset:
    """Change-scale dataset from arrays, baseline outcome in X column 0."""
    n, K = y.shape
    labels = labels or tuple(f"arm{i}" for i in range(arm.max() + 1))
    return LongitudinalDataset(
        schedule=VisitSchedule(tuple(str(k) for k in range(K + 1))),
        subject_ids=np.array([f"s{j}" for j in range(n)]), arm=np.asarray(arm), X=np.asarray(X, float),
        y=np.where(R, y, 0.0), R=np.asarray(R, bool), A=None if A is None else np.asarray(A, bool),
        adherence=None if adherence is None else np.asarray(adherence, bool),
        arm_labels=labels, covariate_names=tuple(f"x{a}" for a in range(X.shape[1])),
        baseline_col=0, response="change",
    )


def random_monotone(rng, n, K, p_stay=0.85):
    """Monotone observation matrix with every subject seen at visit 1."""
    R = np.ones((n, K), dtype=bool)
    for k in range(1, K):
        R[:, k] = R[:, k - 1] & (rng.random(n) < p_stay)
    return R
