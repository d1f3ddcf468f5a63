import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from conftest import ExplodingModel
from ce_sis.config import RunConfig
from ce_sis.densities import StandardNormalDensity, param_dimension
from ce_sis.driver import CeSisRunner, zero_failure_fallback
from ce_sis.errors import ConfigError
from ce_sis.estimators import Dataset, optimal_sis_density_1d
from ce_sis.harness import kl_divergence_1d
from ce_sis.models import DeterministicModel
from ce_sis.rng import Stream, repetition_rng


def dataset_with_failures(batch_factory, n_fail, m=20):
    failures = np.zeros(m, dtype=int)
    failures[:n_fail] = 1
    dataset = Dataset()
    dataset.append(batch_factory(0, np.arange(m, dtype=float), np.ones(m), np.ones(m, dtype=int), failures, n_total=m))
    return dataset


@pytest.mark.parametrize("n_fail, reuse", [(0, True), (4, True), (5, False)])
def test_zero_failure_fallback(batch_factory, n_fail, reuse):
    decision = zero_failure_fallback(dataset_with_failures(batch_factory, n_fail), min_weighted=5)
    assert decision.reuse_previous is reuse
    assert decision.n_weighted == n_fail


def test_unresolved_threshold_is_rejected():
    with pytest.raises(ConfigError):
        CeSisRunner(RunConfig())


def test_spends_exactly_the_budget(small_config):
    report = CeSisRunner(small_config).run(0)
    assert report.completed
    assert len(report.iterations) == small_config.tau + 1
    assert report.total_simulations == small_config.total_budget
    assert [it.simulations for it in report.iterations] == small_config.schedule
    assert [it.m_t for it in report.iterations] == [200, 18, 18, 18]


def test_runs_are_deterministic(small_config):
    first = CeSisRunner(small_config).run(3).to_json()
    second = CeSisRunner(small_config).run(3).to_json()
    assert first == second
    assert CeSisRunner(small_config).run(4).to_json() != first


def test_report_serialises(small_config):
    report = CeSisRunner(small_config).run(0)
    data = json.loads(report.to_json())
    assert data["estimate"] == pytest.approx(report.estimate)
    assert len(data["iterations"]) == small_config.tau + 1
    assert data["iterations"][0]["cic_trace"] is None
    rows = report.iteration_rows()
    assert [row["iteration"] for row in rows] == list(range(small_config.tau + 1))
    assert 0.0 <= report.estimate


def test_no_refinement_is_crude_monte_carlo(small_config):
    config = replace(small_config, tau=0)
    report = CeSisRunner(config).run(0)
    assert len(report.iterations) == 1
    failures = report.estimate * config.n0
    assert failures == pytest.approx(round(failures), abs=1e-9)


def test_recorded_thetas_are_frozen(small_config):
    report = CeSisRunner(small_config).run(0)
    with pytest.raises(ValueError):
        report.iterations[-1].theta.mu[0, 0] = 1.0


def test_simulation_failure_gives_partial_report(small_config):
    report = CeSisRunner(small_config, model=ExplodingModel()).run(0)
    assert not report.completed
    assert "solver diverged" in report.error
    assert report.iterations == []


def test_non_finite_outputs_abort(small_config):
    model = DeterministicModel(lambda x: np.nan)
    report = CeSisRunner(small_config, model=model).run(0)
    assert not report.completed


class TestDeterministicReduction:
    """With N_i = 1 and 0/1 outputs the stochastic criterion is the deterministic one"""

    l = 1.5

    @pytest.fixture
    def config(self):
        return RunConfig(
            threshold=self.l,
            n0=200,
            nt=200,
            tau=2,
            m_ratio=1.0,
            min_weighted=2,
            seed=11,
        )

    def reproduce_inputs(self, config, report):
        f = StandardNormalDensity(1)
        xs, indicators, weights = [], [], []
        for t, it in enumerate(report.iterations[:-1]):
            theta = it.theta
            x = theta.sample(repetition_rng(config.seed, 0, t, Stream.SAMPLE), config.m_for(t))
            xs.append(x[:, 0])
            indicators.append((x[:, 0] > self.l).astype(float))
            weights.append(np.exp(f.log_pdf(x) - theta.log_pdf(x)))
        return np.concatenate(xs), np.concatenate(indicators), np.concatenate(weights)

    def test_single_replication_everywhere(self, config):
        report = CeSisRunner(config, model=DeterministicModel(lambda x: x[0])).run(0)
        assert report.completed
        assert [it.simulations for it in report.iterations] == [200, 200, 200]

    def test_criterion_matches_direct_computation(self, config):
        report = CeSisRunner(config, model=DeterministicModel(lambda x: x[0])).run(0)
        last = report.iterations[-1]
        assert last.trace is not None

        x, indicator, w = self.reproduce_inputs(config, report)
        theta = last.theta
        log_q = logsumexp(
            [
                np.log(a) + stats.norm.logpdf(x, loc=mu[0], scale=np.sqrt(sigma[0, 0]))
                for a, mu, sigma in zip(theta.alpha, theta.mu, theta.sigma)
            ],
            axis=0,
        )
        total_m = len(x)
        ce = -np.sum(indicator * w * log_q) / total_m
        d = param_dimension(theta.k, 1)
        cic = ce + np.sum(indicator * w) / total_m * d / total_m

        row = next(row for row in last.trace.rows if row.k == last.k_star)
        assert row.ce == pytest.approx(ce, rel=1e-12)
        assert row.cic == pytest.approx(cic, rel=1e-12)


@pytest.mark.slow
def test_numerical_example_reproduction(calibrated_l):
    config = RunConfig(threshold=calibrated_l, min_weighted=2, seed=20240601)
    estimates = np.array([CeSisRunner(config).run(rep).estimate for rep in range(100)])
    std_error = estimates.std(ddof=1)
    assert abs(estimates.mean() - 0.00996) < 3 * std_error / np.sqrt(100)
    assert 0.0004 <= std_error <= 0.0015


@pytest.mark.slow
def test_refinement_moves_towards_optimal_density(numerical_model, calibrated_l):
    config = RunConfig(threshold=calibrated_l, min_weighted=2, seed=99)
    q_star = optimal_sis_density_1d(numerical_model, StandardNormalDensity(1), calibrated_l, config.total_budget)
    improved = 0
    for rep in range(50):
        report = CeSisRunner(config).run(rep)
        first, last = report.iterations[0].theta, report.iterations[-1].theta
        improved += kl_divergence_1d(q_star, last) < kl_divergence_1d(q_star, first)
    assert improved >= 40
