import numpy as np
import pytest

from contcrm.data import LoggedDataset
from contcrm.embeddings import ContextMap, JointEmbedding, fit_nystrom

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_record(request):
    """Record one acceptance line: ``record(criterion, passed, detail)``."""
    store = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(criterion: int, passed: bool, detail: str) -> None:
        store[criterion] = (bool(passed), detail)
        status = "PASS" if passed else "FAIL"
        print(f"\ncriterion {criterion}: {status} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(store):
        passed, detail = store[criterion]
        terminalreporter.write_line(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_dataset(n=200, d=2, seed=0, family="normal"):
    """Small logged dataset with a N(1.5, 0.5^2) (or lognormal) logging policy."""
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    if family == "normal":
        a = 1.5 + 0.5 * r.standard_normal(n)
        prop = np.exp(-0.5 * ((a - 1.5) / 0.5) ** 2) / (0.5 * np.sqrt(2 * np.pi))
    else:
        a = np.exp(0.3 + 0.3 * r.standard_normal(n))
        z = (np.log(a) - 0.3) / 0.3
        prop = np.exp(-0.5 * z * z) / (a * 0.3 * np.sqrt(2 * np.pi))
    y = -np.exp(-((a - 1.0 - 0.3 * X[:, 0]) ** 2)) + 0.1 * r.standard_normal(n)
    return LoggedDataset(X, a, prop, y)


@pytest.fixture
def small_ds():
    return make_dataset()


def make_joint(actions, m=4, d=2, kind="linear", intercept=True, bandwidth=1.0):
    anchors = np.linspace(np.min(actions), np.max(actions), m)
    return JointEmbedding(ContextMap(kind, d, intercept), fit_nystrom(anchors, bandwidth))
