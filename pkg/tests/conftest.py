import numpy as np
import pytest

from shapleak.data import Dataset, SynthConfig, gen_synthetic, split
from shapleak.models import train_model

# acceptance criteria record their verdicts here; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


class LinearProbModel:
    """Two-class model with p0 = b + w.x; additive, so Shapley values are w_i (x_i - x0_i)."""

    def __init__(self, w, b):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.n_features_in_ = self.w.size
        self.n_classes_ = 2

    def predict_proba(self, X):
        p0 = np.clip(self.b + np.atleast_2d(X) @ self.w, 0.0, 1.0)
        return np.column_stack([p0, 1.0 - p0])


@pytest.fixture(scope="session")
def small_synth():
    return gen_synthetic(SynthConfig(n_features=8, n_samples=600, seed=3))


@pytest.fixture(scope="session")
def small_split(small_synth):
    return split(small_synth, 0)


_FAST = {
    "MLP": {"epochs": 30},
    "RF": {"n_trees": 10, "max_depth": 4},
    "GBDT": {"n_trees": 10, "max_depth": 2},
    "KSVM": {"epochs": 10, "max_support": 100},
}


@pytest.fixture(scope="session")
def small_models(small_split):
    return {k: train_model(k, small_split.train, seed=0, **p) for k, p in _FAST.items()}


@pytest.fixture
def linear_model():
    return LinearProbModel([0.15, -0.1, 0.12, 0.08, -0.05, 0.1], 0.4)


def make_dataset(X, y, n_classes=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    return Dataset(X, y, [f"f{i}" for i in range(X.shape[1])],
                   int(n_classes or y.max() + 1))
