"""Shared fixtures: seeded generators, toy simulators and a calibrated threshold"""

import numpy as np
import pytest
from scipy import stats

from ce_sis.config import RunConfig
from ce_sis.densities import GmmParams, StandardNormalDensity
from ce_sis.estimators import Batch, Dataset, h_hat
from ce_sis.harness import calibrate_l
from ce_sis.models import NumericalExampleModel, OracleModel

NUMERICAL_TARGET_P = 0.00996


class PureNoiseModel(OracleModel):
    """Y ~ N(0, 1) whatever the input, so s(x) = 1 - Phi(l)"""

    input_dimension = 1

    def simulate(self, x, rng):
        return float(rng.standard_normal())

    def true_s(self, x, l):
        s = stats.norm.sf(l)
        return np.full(np.shape(np.asarray(x, dtype=float).reshape(-1)), s)


class ConstantModel(OracleModel):
    """Always returns the same output"""

    input_dimension = 1

    def __init__(self, value: float):
        self.value = value

    def simulate(self, x, rng):
        return self.value

    def true_s(self, x, l):
        return np.full(np.asarray(x, dtype=float).reshape(-1).shape, float(self.value > l))


class ExplodingModel(OracleModel):
    input_dimension = 1

    def simulate(self, x, rng):
        raise RuntimeError("solver diverged")

    def true_s(self, x, l):
        return np.zeros(np.asarray(x, dtype=float).reshape(-1).shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def normal_density():
    return StandardNormalDensity(1)


@pytest.fixture
def numerical_model():
    return NumericalExampleModel()


@pytest.fixture(scope="session")
def calibrated_l():
    """Threshold giving P(Y > l) = 0.00996 on the numerical example"""
    return calibrate_l(NumericalExampleModel(), StandardNormalDensity(1), NUMERICAL_TARGET_P)


@pytest.fixture
def small_config(calibrated_l):
    """A short schedule on the numerical example"""
    return RunConfig(
        threshold=calibrated_l,
        n0=200,
        nt=60,
        tau=3,
        m_ratio=0.3,
        min_weighted=2,
        seed=7,
    )


def make_batch(iteration, x, w, n_reps, failures, n_total, theta=None):
    """Batch with frozen weights computed the way the driver does"""
    w = np.asarray(w, dtype=float)
    n_reps = np.asarray(n_reps)
    failures = np.asarray(failures)
    v = h_hat(failures / n_reps, n_total) * w
    return Batch(
        iteration=iteration,
        theta=theta or GmmParams.single([0.0], 1.0),
        x=np.asarray(x, dtype=float).reshape(len(w), -1),
        w=w,
        n_reps=n_reps,
        failures=failures,
        v=v,
    )


@pytest.fixture
def two_batch_dataset():
    dataset = Dataset()
    dataset.append(make_batch(0, [0.5, 2.0], [1.0, 0.8], [1, 1], [0, 1], n_total=10))
    dataset.append(make_batch(1, [1.5, 2.5, 3.0], [0.5, 0.2, 0.1], [2, 3, 1], [1, 3, 0], n_total=10))
    return dataset


@pytest.fixture
def batch_factory():
    return make_batch
