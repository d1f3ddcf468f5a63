"""CE-SIS outer loop: iteratively refine the mixture IS density and estimate P(Y > l)"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .allocation import AllocationInput, allocate, allocation_diagnostics
from .cic import CicTrace, select_k
from .config import RunConfig
from .densities import GmmParams, InputDensity, gmm_log_pdf
from .errors import ConfigError, SelectionError, SimulationError
from .estimators import Batch, Dataset, h_hat, p_bar_sis, p_hat_sis
from .models import SimulationModel
from .rng import Stream, repetition_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FallbackDecision:
    reuse_previous: bool
    n_weighted: int
    reason: str = ""


def zero_failure_fallback(dataset: Dataset, min_weighted: int = 5) -> FallbackDecision:
    """Keep the previous density when too few records carry weight to fit a mixture"""
    n_weighted = dataset.n_positive
    if n_weighted < min_weighted:
        return FallbackDecision(
            reuse_previous=True,
            n_weighted=n_weighted,
            reason=f"{n_weighted} weighted records (< {min_weighted})",
        )
    return FallbackDecision(reuse_previous=False, n_weighted=n_weighted)


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


@dataclass
class IterationReport:
    iteration: int
    n_t: int
    m_t: int
    k_star: int
    theta: GmmParams
    p_hat: float
    p_bar: float
    simulations: int
    trace: Optional[CicTrace] = None
    fallback: Optional[FallbackDecision] = None
    allocation: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        trace = None
        if self.trace is not None:
            trace = [
                {key: _finite_or_none(value) if isinstance(value, float) else value for key, value in row.items()}
                for row in self.trace.to_dicts()
            ]
        return {
            "iteration": self.iteration,
            "n_t": self.n_t,
            "m_t": self.m_t,
            "k_star": self.k_star,
            "theta": self.theta.to_dict(),
            "p_hat": self.p_hat,
            "p_bar": self.p_bar,
            "simulations": self.simulations,
            "cic_trace": trace,
            "fallback": None if self.fallback is None else self.fallback.reason,
            "allocation": None
            if self.allocation is None
            else {key: _finite_or_none(value) if isinstance(value, float) else value for key, value in self.allocation.items()},
        }


@dataclass
class RunReport:
    """Per-iteration history and the final estimate of one CE-SIS run"""

    repetition: int
    seed: int
    threshold: float
    total_budget: int
    iterations: List[IterationReport] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def estimate(self) -> float:
        return self.iterations[-1].p_bar if self.iterations else float("nan")

    @property
    def total_simulations(self) -> int:
        return sum(it.simulations for it in self.iterations)

    @property
    def fallbacks(self) -> int:
        return sum(1 for it in self.iterations if it.fallback is not None)

    @property
    def completed(self) -> bool:
        return self.error is None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "repetition": self.repetition,
            "seed": self.seed,
            "threshold": self.threshold,
            "total_budget": self.total_budget,
            "estimate": _finite_or_none(self.estimate),
            "total_simulations": self.total_simulations,
            "fallbacks": self.fallbacks,
            "error": self.error,
            "iterations": [it.to_dict() for it in self.iterations],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def iteration_rows(self) -> List[Dict[str, Any]]:
        return [
            {
                "repetition": self.repetition,
                "iteration": it.iteration,
                "k_star": it.k_star,
                "p_bar": it.p_bar,
                "sims_used": it.simulations,
            }
            for it in self.iterations
        ]


class CeSisRunner:
    """Runs the CE-SIS iterations for one configuration"""

    def __init__(
        self,
        config: RunConfig,
        model: Optional[SimulationModel] = None,
        density: Optional[InputDensity] = None,
    ):
        if config.threshold is None:
            raise ConfigError("threshold.l is not resolved; calibrate it first")
        self.config = config
        self.model = model or config.build_model()
        self.density = density or config.build_density()
        self.logger = logging.getLogger(__name__)

    def _simulate(self, x: np.ndarray, n_reps: np.ndarray, repetition: int, iteration: int) -> np.ndarray:
        """Failure counts per input, each input on its own stream"""
        failures = np.zeros(len(n_reps), dtype=np.int64)
        for i, (point, reps) in enumerate(zip(x, n_reps)):
            rng = repetition_rng(self.config.seed, repetition, iteration, Stream.SIMULATE, i)
            try:
                y = np.asarray(self.model.simulate_batch(point, int(reps), rng), dtype=float)
            except Exception as e:
                raise SimulationError(f"Simulation failed at iteration {iteration}, input {i}: {e}") from e
            if y.shape != (reps,) or not np.all(np.isfinite(y)):
                raise SimulationError(f"Simulator returned invalid outputs at iteration {iteration}, input {i}")
            failures[i] = int(np.count_nonzero(y > self.config.threshold))
        return failures

    def _select(self, dataset: Dataset, theta: GmmParams, repetition: int, iteration: int):
        decision = zero_failure_fallback(dataset, self.config.min_weighted)
        if decision.reuse_previous:
            self.logger.warning(f"Iteration {iteration}: {decision.reason}, reusing previous density")
            return theta, None, decision
        rng = repetition_rng(self.config.seed, repetition, iteration, Stream.SELECT)
        try:
            selection = select_k(dataset, self.config.k_grid, self.config.em, rng)
        except SelectionError as e:
            self.logger.warning(f"Iteration {iteration}: {e}, reusing previous density")
            return theta, None, FallbackDecision(reuse_previous=True, n_weighted=decision.n_weighted, reason=str(e))
        for row in selection.trace.rows:
            self.logger.debug(f"Iteration {iteration} CIC: {row}")
        return selection.theta, selection.trace, None

    def run(self, repetition: int = 0) -> RunReport:
        config = self.config
        n_total = config.total_budget
        report = RunReport(
            repetition=repetition,
            seed=config.seed,
            threshold=float(config.threshold),
            total_budget=n_total,
        )
        theta = config.initial_theta()
        dataset = Dataset()

        try:
            for t, n_t in enumerate(config.schedule):
                m_t = config.m_for(t)
                trace = fallback = diagnostics = None
                if t > 0:
                    theta, trace, fallback = self._select(dataset, theta, repetition, t)

                x = theta.sample(repetition_rng(config.seed, repetition, t, Stream.SAMPLE), m_t)
                w = np.exp(self.density.log_pdf(x) - gmm_log_pdf(theta, x))
                if t == 0:
                    n_reps = np.ones(m_t, dtype=np.int64)
                else:
                    alloc = AllocationInput(weights=w, p_ref=report.iterations[-1].p_bar, n_t=n_t, m_t=m_t)
                    n_reps = allocate(alloc)
                    diagnostics = allocation_diagnostics(alloc)
                    self.logger.debug(f"Iteration {t} allocation: {diagnostics}")

                failures = self._simulate(x, n_reps, repetition, t)
                v = h_hat(failures / n_reps, n_total) * w
                batch = Batch(iteration=t, theta=theta, x=x, w=w, n_reps=n_reps, failures=failures, v=v)
                dataset.append(batch)

                report.iterations.append(
                    IterationReport(
                        iteration=t,
                        n_t=n_t,
                        m_t=m_t,
                        k_star=theta.k,
                        theta=theta,
                        p_hat=p_hat_sis(batch),
                        p_bar=p_bar_sis(dataset),
                        simulations=batch.simulations,
                        trace=trace,
                        fallback=fallback,
                        allocation=diagnostics,
                    )
                )
                self.logger.info(
                    f"Repetition {repetition} iteration {t}: k*={theta.k} "
                    f"P_bar={report.iterations[-1].p_bar:.6g} sims={batch.simulations}"
                )
        except SimulationError as e:
            self.logger.error(f"Repetition {repetition} aborted: {e}", exc_info=True)
            report.error = str(e)
        return report


def run_ce_sis(config: RunConfig, repetition: int = 0) -> RunReport:
    """Run one CE-SIS repetition with the model and input density named in the config"""
    return CeSisRunner(config).run(repetition)
