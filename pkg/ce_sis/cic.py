"""Cross-entropy information criterion and mixture-order selection"""

import io
import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .densities import GmmParams, param_dimension
from .errors import SelectionError
from .estimators import Dataset, p_bar_sis
from .weighted_em import EmSettings, effective_sample_size, em_fit, weighted_ce_objective

logger = logging.getLogger(__name__)

# effective weighted samples required per free parameter
SAMPLES_PER_PARAMETER = 1


@dataclass(frozen=True)
class KGrid:
    """Candidate mixture orders k_min..k_max for one iteration"""

    k_min: int = 1
    k_max_cap: int = 8

    def validate(self) -> List[str]:
        errors = []
        if self.k_min < 1:
            errors.append("k.min must be at least 1")
        if self.k_max_cap < self.k_min:
            errors.append("k.max_cap must not be smaller than k.min")
        return errors

    def effective_k_max(self, n_effective: float, p: int) -> int:
        """Largest k whose parameter count fits the effective sample size, never below k_min"""
        k_max = self.k_min
        for k in range(self.k_min, self.k_max_cap + 1):
            if param_dimension(k, p) * SAMPLES_PER_PARAMETER <= n_effective:
                k_max = k
            else:
                break
        return k_max


@dataclass(frozen=True)
class CicTraceRow:
    k: int
    d: int
    ce: float
    penalty: float
    cic: float
    infeasible: bool = False


@dataclass
class CicTrace:
    rows: List[CicTraceRow] = field(default_factory=list)

    def add(self, row: CicTraceRow) -> None:
        self.rows.append(row)

    def feasible(self) -> List[CicTraceRow]:
        return [row for row in self.rows if not row.infeasible]

    def to_dicts(self) -> List[dict]:
        return [row.__dict__.copy() for row in self.rows]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["k", "d", "ce", "penalty", "cic", "infeasible"])
        for row in self.rows:
            writer.writerow([row.k, row.d, f"{row.ce:.12g}", f"{row.penalty:.12g}", f"{row.cic:.12g}", int(row.infeasible)])
        return buffer.getvalue()


@dataclass(frozen=True)
class Selection:
    k_star: int
    theta: GmmParams
    trace: CicTrace


def aggregated_ce(theta: GmmParams, dataset: Dataset) -> float:
    """Cross-entropy estimate over every record aggregated so far"""
    samples = dataset.weighted_samples()
    if samples.n_positive == 0:
        return 0.0
    return weighted_ce_objective(theta, samples)


def k_hat_sis(dataset: Dataset) -> float:
    """Penalty scale for the stochastic case: the aggregated probability estimate"""
    return p_bar_sis(dataset)


def k_hat_dis(dataset: Dataset) -> float:
    """Penalty scale for the deterministic case: (1 / sum m) * sum h * w"""
    samples = dataset.weighted_samples()
    return float(samples.v.sum() / samples.total_count)


def cic_sis(ce_value: float, k_hat: float, d: int, total_m: int) -> float:
    """CE estimate plus the complexity penalty k_hat * d / sum m"""
    if total_m < 1:
        raise ValueError("total_m must be positive")
    return ce_value + k_hat * d / total_m


def cic_dis(theta: GmmParams, dataset: Dataset) -> float:
    """Deterministic-model CIC with h the failure indicator carried in the frozen weights"""
    d = param_dimension(theta.k, theta.p)
    return cic_sis(aggregated_ce(theta, dataset), k_hat_dis(dataset), d, dataset.total_m)


def select_k(dataset: Dataset, grid: KGrid, settings: EmSettings, rng: np.random.Generator) -> Selection:
    """Fit each candidate order and keep the one with the smallest CIC.

    The scan stops at the first infeasible order; ties go to the smaller k.
    """
    samples = dataset.weighted_samples()
    if samples.n_positive == 0:
        raise SelectionError("Dataset carries no positive weight")
    p = samples.dimension
    total_m = dataset.total_m
    k_hat = k_hat_sis(dataset)
    k_max = grid.effective_k_max(effective_sample_size(samples.v), p)
    candidates = range(grid.k_min, k_max + 1)

    trace = CicTrace()
    best: Optional[tuple] = None
    for k, k_rng in zip(candidates, rng.spawn(len(candidates))):
        d = param_dimension(k, p)
        fit = em_fit(k, samples, settings, k_rng)
        if not fit.feasible:
            logger.debug(f"k={k} infeasible: {fit.reason}")
            trace.add(CicTraceRow(k=k, d=d, ce=np.inf, penalty=np.nan, cic=np.inf, infeasible=True))
            break
        penalty = k_hat * d / total_m
        cic = cic_sis(fit.objective, k_hat, d, total_m)
        trace.add(CicTraceRow(k=k, d=d, ce=fit.objective, penalty=penalty, cic=cic))
        logger.debug(f"k={k}: ce={fit.objective:.6g} penalty={penalty:.3g} cic={cic:.6g}")
        if best is None or cic < best[1]:
            best = (k, cic, fit.theta)

    if best is None:
        raise SelectionError(f"No feasible mixture order in [{grid.k_min}, {k_max}]")
    return Selection(k_star=best[0], theta=best[2], trace=trace)
