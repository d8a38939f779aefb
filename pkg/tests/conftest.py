import numpy as np
import pytest

from flymc.harness import SyntheticSpec, generate_synthetic
from flymc.models import LogisticModel, Prior, RobustTModel, SoftmaxModel

# (criterion number, label, passed, detail) rows appended by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    by_criterion = {}
    for number, label, ok, detail in ACCEPTANCE_RESULTS:
        by_criterion.setdefault(number, []).append((label, ok, detail))
    for number in sorted(by_criterion):
        rows = by_criterion[number]
        ok = all(r[1] for r in rows)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({len(rows)} checks)")
        for label, row_ok, detail in rows:
            terminalreporter.write_line(f"    {'pass' if row_ok else 'FAIL'}  {label}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def logistic_data():
    return generate_synthetic(SyntheticSpec(), "logistic", 60, 3, seed=7)


@pytest.fixture(scope="session")
def softmax_data():
    return generate_synthetic(SyntheticSpec(), "softmax", 60, 3, n_classes=3, seed=8)


@pytest.fixture(scope="session")
def robust_data():
    return generate_synthetic(SyntheticSpec(prior_kind="laplace"), "robust_t", 60, 3, seed=9)


@pytest.fixture(scope="session")
def problems(logistic_data, softmax_data, robust_data):
    """(data, model, prior) for every likelihood family."""
    return {
        "logistic": (logistic_data, LogisticModel(), Prior("gaussian", 1.0)),
        "softmax": (softmax_data, SoftmaxModel(), Prior("gaussian", 1.0)),
        "robust_t": (robust_data, RobustTModel(4.0, 1.0), Prior("laplace", 1.0)),
    }
