import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from conftest import ConstantModel, PureNoiseModel
from ce_sis.densities import GmmParams, StandardNormalDensity
from ce_sis.errors import OracleError
from ce_sis.estimators import (
    Batch,
    Dataset,
    SimRecord,
    cmc_ratio,
    h_hat,
    optimal_allocation_exact,
    optimal_sis_density_1d,
    p_bar_sis,
    p_cmc,
    p_dis,
    p_hat_sis,
    s_hat,
)

THETA = GmmParams.single([0.0], 1.0)


def record(failures, n_reps, w=1.0):
    return SimRecord(x=np.array([0.0]), iteration=0, w=w, n_reps=n_reps, failures=failures, v=0.0)


def test_s_hat_examples():
    assert s_hat(record(0, 4)) == 0.0
    assert s_hat(record(4, 4)) == 1.0
    assert s_hat(record(3, 7)) == pytest.approx(3 / 7)


def test_h_hat_examples():
    assert h_hat(0.0, 100) == 0.0
    assert h_hat(1.0, 100) == 1.0
    assert h_hat(0.5, 100) == pytest.approx(0.5024938, abs=1e-7)
    values = h_hat(np.linspace(0.0, 1.0, 101), 50)
    assert np.all(np.diff(values) >= 0.0)
    with pytest.raises(ValueError):
        h_hat(1.5, 10)


def test_p_bar_examples(batch_factory):
    none = Dataset()
    none.append(batch_factory(0, [0.0, 1.0], [1.0, 2.0], [2, 2], [0, 0], n_total=4))
    assert p_bar_sis(none) == 0.0

    one = Dataset()
    one.append(batch_factory(0, [0.0], [1.0], [3], [3], n_total=3))
    assert p_bar_sis(one) == 1.0

    two = Dataset()
    two.append(batch_factory(0, [0.0, 1.0], [0.5, 2.0], [1, 1], [1, 0], n_total=8))
    two.append(batch_factory(1, [2.0, 3.0], [0.1, 0.3], [4, 2], [2, 1], n_total=8))
    expected = ((1 * 0.5 + 0 * 2.0) / 2 + (0.5 * 0.1 + 0.5 * 0.3) / 2) / 2
    assert p_bar_sis(two) == pytest.approx(expected, rel=1e-15)


def test_first_iteration_reduces_to_deterministic_form(batch_factory):
    w = np.array([0.3, 1.2, 0.8, 2.0])
    failures = np.array([1, 0, 1, 1])
    dataset = Dataset()
    dataset.append(batch_factory(0, [0.0, 1.0, 2.0, 3.0], w, np.ones(4, dtype=int), failures, n_total=4))
    assert p_bar_sis(dataset) == pytest.approx(p_dis(failures, w), rel=1e-15)


def test_p_cmc_examples():
    assert p_cmc(0, 10) == 0.0
    assert p_cmc(10, 10) == 1.0
    assert p_cmc(5, 1000) == 0.005
    with pytest.raises(ValueError):
        p_cmc(11, 10)


def test_cmc_ratio_anchors():
    assert round(100 * cmc_ratio(1000, 0.00052, 0.00996), 2) == 2.74
    assert round(100 * cmc_ratio(1600, 0.00073, 0.00996), 2) == 8.65
    assert cmc_ratio(1000, 0.0, 0.01) == 0.0
    with pytest.raises(ValueError):
        cmc_ratio(1000, 0.001, 0.0)


def test_cmc_ratio_of_crude_monte_carlo_is_one():
    p, n = 0.01, 1600
    assert cmc_ratio(n, math.sqrt(p * (1 - p) / n), p) == pytest.approx(1.0)


def test_optimal_allocation_examples():
    np.testing.assert_allclose(optimal_allocation_exact([0.2, 0.2, 0.2, 0.2], 100), [25.0] * 4)
    np.testing.assert_allclose(optimal_allocation_exact([0.5, 0.5], 10), [5.0, 5.0])
    np.testing.assert_allclose(optimal_allocation_exact([1.0, 1.0], 6), [3.0, 3.0])
    n = optimal_allocation_exact([0.01, 0.1, 0.5, 1.0], 1000)
    assert n.sum() == pytest.approx(1000.0)
    assert n[3] == 0.0
    assert np.all(np.diff(n) <= 0.0)


class TestUnbiasedness:
    """X uniform on three points, Bernoulli outputs with known s, fixed q and allocation"""

    f = [Fraction(1, 3)] * 3
    q = [Fraction(1, 2), Fraction(1, 3), Fraction(1, 6)]
    s = [Fraction(1, 5), Fraction(1, 2), Fraction(9, 10)]
    n_reps = (2, 3)
    true_p = sum(fi * si for fi, si in zip(f, s))

    def outcomes(self):
        """Every (points, failure counts) pair with its exact probability"""
        for points in itertools.product(range(3), repeat=len(self.n_reps)):
            ranges = [range(n + 1) for n in self.n_reps]
            for failures in itertools.product(*ranges):
                prob = Fraction(1)
                for i, k, n in zip(points, failures, self.n_reps):
                    prob *= self.q[i] * math.comb(n, k) * self.s[i] ** k * (1 - self.s[i]) ** (n - k)
                yield points, failures, prob

    def test_exact_expectation_rational(self):
        expectation = Fraction(0)
        for points, failures, prob in self.outcomes():
            estimate = sum(Fraction(k, n) * self.f[i] / self.q[i] for i, k, n in zip(points, failures, self.n_reps))
            expectation += prob * estimate / len(self.n_reps)
        assert expectation == self.true_p

    def test_exact_expectation_of_implementation(self):
        total = sum(prob for _, _, prob in self.outcomes())
        assert total == 1
        expectation = 0.0
        for points, failures, prob in self.outcomes():
            w = [float(self.f[i] / self.q[i]) for i in points]
            batch = Batch(iteration=0, theta=THETA, x=np.array(points, dtype=float), w=w,
                          n_reps=self.n_reps, failures=failures, v=np.zeros(len(points)))
            expectation += float(prob) * p_hat_sis(batch)
        assert expectation == pytest.approx(float(self.true_p), abs=1e-12)

    def test_seeded_runs_match(self):
        rng = np.random.default_rng(31)
        q = np.array([float(v) for v in self.q])
        s = np.array([float(v) for v in self.s])
        w = np.array([float(fi / qi) for fi, qi in zip(self.f, self.q)])
        runs = 100_000
        estimates = np.empty(runs)
        for r in range(runs):
            points = rng.choice(3, size=2, p=q)
            failures = rng.binomial(self.n_reps, s[points])
            batch = Batch(iteration=0, theta=THETA, x=points.astype(float), w=w[points],
                          n_reps=self.n_reps, failures=failures, v=np.zeros(2))
            estimates[r] = p_hat_sis(batch)
        se = estimates.std(ddof=1) / math.sqrt(runs)
        assert abs(estimates.mean() - float(self.true_p)) < 4 * se


def test_dataset_rejects_out_of_order_batches(batch_factory):
    dataset = Dataset()
    with pytest.raises(ValueError):
        dataset.append(batch_factory(1, [0.0], [1.0], [1], [0], n_total=1))


def test_batches_are_frozen(batch_factory):
    batch = batch_factory(0, [0.0, 1.0], [1.0, 1.0], [2, 2], [1, 2], n_total=4)
    with pytest.raises(ValueError):
        batch.v[0] = 10.0
    with pytest.raises(ValueError):
        batch_factory(0, [0.0], [1.0], [2], [3], n_total=2)
    assert [r.failures for r in batch.records()] == [1, 2]


def test_optimal_density_equals_f_when_s_is_one(rng):
    f = StandardNormalDensity(1)
    q_star = optimal_sis_density_1d(ConstantModel(10.0), f, 0.0, 1000)
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(q_star.smooth_pdf(x), f.pdf(x), rtol=1e-6)
    tails = np.array([-3.6, -3.25, 3.4, 3.55])
    np.testing.assert_allclose(q_star.smooth_pdf(tails), f.pdf(tails), rtol=1e-6)
    assert np.sum(q_star.cell_density * np.diff(q_star.grid)) == pytest.approx(1.0, abs=1e-12)
    draws = q_star.sample(rng, 20_000)
    assert draws.shape == (20_000, 1)
    assert stats.kstest(draws[:, 0], "norm").pvalue > 1e-4


def test_optimal_density_equals_f_when_s_is_constant():
    f = StandardNormalDensity(1)
    q_star = optimal_sis_density_1d(PureNoiseModel(), f, 0.5, 1000)
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(q_star.smooth_pdf(x), f.pdf(x), rtol=1e-6)


def test_optimal_density_piecewise_pdf_matches_sampler(numerical_model, calibrated_l):
    q_star = optimal_sis_density_1d(numerical_model, StandardNormalDensity(1), calibrated_l, 1000)
    mids = 0.5 * (q_star.grid[:-1] + q_star.grid[1:])
    np.testing.assert_allclose(q_star.pdf(mids), q_star.cell_density)
    assert q_star.pdf(np.array([100.0]))[0] == 0.0


def test_optimal_density_requires_one_dimension():
    with pytest.raises(OracleError):
        optimal_sis_density_1d(ConstantModel(1.0), StandardNormalDensity(2), 0.0, 100)
