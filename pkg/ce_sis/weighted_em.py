"""Weighted EM fit of Gaussian mixture IS densities.

Minimises the weighted cross-entropy estimator

    C(theta) = -(1/M) * sum_i v_i * log q(x_i; theta)

where v_i = h_hat(x_i) * w(x_i) is frozen when the point was simulated and M
counts every record, including the ones with zero weight.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from .densities import GmmParams, as_points, max_condition_number
from .errors import DegenerateComponentError, DensityError, FitError

logger = logging.getLogger(__name__)

UNDERFLOW_LOG_DENSITY = -700.0
MIN_COMPONENT_WEIGHT = 1e-12
# smallest / largest eigenvalue below this counts as a singular covariance
SINGULAR_EIGEN_RATIO = 1e-12


@dataclass(frozen=True)
class WeightedSample:
    """A single point with its cross-entropy weight"""

    x: np.ndarray
    v: float


@dataclass(frozen=True, eq=False)
class WeightedSamples:
    """Columnar weighted data: points x (n, p), weights v (n,), and the count M"""

    x: np.ndarray
    v: np.ndarray
    total_count: int

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        x = x.reshape(len(v), -1) if x.ndim < 2 else x
        if x.shape[0] != len(v):
            raise FitError(f"{x.shape[0]} points but {len(v)} weights")
        if np.any(v < 0.0) or not np.all(np.isfinite(v)):
            raise FitError("Weights must be finite and non-negative")
        if self.total_count < len(v):
            raise FitError(f"total_count {self.total_count} is smaller than the {len(v)} samples given")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_arrays(cls, x, v, total_count: Optional[int] = None) -> "WeightedSamples":
        v = np.asarray(v, dtype=float).reshape(-1)
        return cls(x=x, v=v, total_count=len(v) if total_count is None else total_count)

    @classmethod
    def from_list(cls, samples: List[WeightedSample]) -> "WeightedSamples":
        if not samples:
            raise FitError("no effective samples")
        x = np.vstack([np.atleast_1d(np.asarray(s.x, dtype=float)) for s in samples])
        return cls.from_arrays(x, [s.v for s in samples])

    @property
    def dimension(self) -> int:
        return self.x.shape[1]

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.v > 0.0))

    def positive(self) -> "WeightedSamples":
        """Only the rows that carry weight; M is kept"""
        mask = self.v > 0.0
        return WeightedSamples(x=self.x[mask], v=self.v[mask], total_count=self.total_count)

    def scaled(self, factor: float) -> "WeightedSamples":
        return WeightedSamples(x=self.x, v=self.v * factor, total_count=self.total_count)


@dataclass(frozen=True)
class EmSettings:
    """Restart and stopping settings for the EM fit"""

    restarts: int = 10
    rel_tol: float = 0.01
    max_iters: int = 200
    cond_threshold: float = 1e5

    def validate(self) -> List[str]:
        errors = []
        if self.restarts <= 0:
            errors.append("em.restarts must be positive")
        if self.rel_tol <= 0:
            errors.append("em.rel_tol must be positive")
        if self.max_iters <= 0:
            errors.append("em.max_iters must be positive")
        if self.cond_threshold <= 0:
            errors.append("em.cond_threshold must be positive")
        return errors


@dataclass(frozen=True)
class EmFitResult:
    """Best restart of an EM fit, or the reason the order is infeasible"""

    k: int
    theta: Optional[GmmParams]
    objective: float
    iterations: int = 0
    ill_conditioned: int = 0
    restarts: int = 0
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.theta is not None


def _as_samples(samples) -> WeightedSamples:
    if isinstance(samples, WeightedSamples):
        return samples
    return WeightedSamples.from_list(list(samples))


def weighted_ce_objective(theta: GmmParams, samples) -> float:
    """-(1/M) * sum_i v_i log q(x_i; theta); lower is better"""
    data = _as_samples(samples)
    mask = data.v > 0.0
    if not np.any(mask):
        raise FitError("no effective samples")
    log_q = theta.log_pdf(data.x[mask])
    if not np.all(np.isfinite(log_q)):
        raise FitError("q(x; theta) vanishes at a weighted sample")
    return float(-np.dot(data.v[mask], log_q) / data.total_count)


def responsibilities(theta: GmmParams, x) -> np.ndarray:
    """gamma_ij = alpha_j q_j(x_i) / sum_j' alpha_j' q_j'(x_i), shape (n, k).

    Rows where every component log-density is below -700 get uniform
    responsibilities.
    """
    component = theta.component_log_pdf(as_points(x, theta.p))
    joint = component + np.log(theta.alpha)
    gamma = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    underflow = np.all(component < UNDERFLOW_LOG_DENSITY, axis=1)
    if np.any(underflow):
        gamma[underflow] = 1.0 / theta.k
    return gamma


def effective_sample_size(weights) -> float:
    """Kish effective number of points, (sum v)^2 / sum v^2"""
    v = np.asarray(weights, dtype=float).reshape(-1)
    squares = float(np.dot(v, v))
    return float(v.sum() ** 2 / squares) if squares > 0.0 else 0.0


def em_step(theta: GmmParams, samples) -> GmmParams:
    """One pass of the weighted alpha / mu / Sigma updating equations.

    Raises DegenerateComponentError when a component loses its weight, rests
    on fewer than p + 1 effective points, or ends with a singular covariance.
    """
    data = _as_samples(samples).positive()
    if data.x.shape[0] == 0:
        raise FitError("no effective samples")
    total = data.v.sum()
    gamma = responsibilities(theta, data.x)
    weighted = data.v[:, None] * gamma
    nk = weighted.sum(axis=0)
    if np.any(nk < MIN_COMPONENT_WEIGHT * total):
        raise DegenerateComponentError(f"Component weight vanished: {nk / total}")
    support = np.array([effective_sample_size(weighted[:, j]) for j in range(theta.k)])
    if np.any(support < theta.p + 1):
        raise DegenerateComponentError(f"Component rests on too few effective points: {support}")

    alpha = nk / total
    mu = (weighted.T @ data.x) / nk[:, None]
    sigma = np.empty((theta.k, theta.p, theta.p))
    for j in range(theta.k):
        centred = data.x - mu[j]
        cov = (weighted[:, j, None] * centred).T @ centred / nk[j]
        sigma[j] = 0.5 * (cov + cov.T)
        eig = np.linalg.eigvalsh(sigma[j])
        if not eig[-1] > 0.0 or eig[0] <= SINGULAR_EIGEN_RATIO * eig[-1]:
            raise DegenerateComponentError(f"Covariance of component {j} is singular (eigenvalues {eig})")
    try:
        return GmmParams(alpha=alpha, mu=mu, sigma=sigma)
    except DensityError as e:
        raise DegenerateComponentError(str(e)) from e


def weighted_covariance(data: WeightedSamples) -> np.ndarray:
    weights = data.v / data.v.sum()
    mean = weights @ data.x
    centred = data.x - mean
    return (weights[:, None] * centred).T @ centred


def _initial_theta(k: int, data: WeightedSamples, global_cov: np.ndarray, rng: np.random.Generator) -> GmmParams:
    """Means drawn from the data by weight without replacement, global covariance, uniform alpha"""
    picks = rng.choice(data.x.shape[0], size=k, replace=False, p=data.v / data.v.sum())
    return GmmParams(
        alpha=np.full(k, 1.0 / k),
        mu=data.x[picks],
        sigma=np.repeat(global_cov[None, :, :], k, axis=0),
    )


def _is_ill_conditioned(theta: GmmParams, scale: float, threshold: float) -> bool:
    if max_condition_number(theta) > threshold:
        return True
    # a scalar covariance always has condition number 1; compare one eigenvalue
    # with the data scale, so only the square root of the threshold applies
    smallest = min(np.linalg.eigvalsh(s)[0] for s in theta.sigma)
    return smallest * math.sqrt(threshold) < scale


def _run_restart(theta: GmmParams, data: WeightedSamples, settings: EmSettings):
    objective = weighted_ce_objective(theta, data)
    iterations = 0
    for iterations in range(1, settings.max_iters + 1):
        theta_next = em_step(theta, data)
        objective_next = weighted_ce_objective(theta_next, data)
        reduction = (objective - objective_next) / max(abs(objective), np.finfo(float).tiny)
        theta, objective = theta_next, objective_next
        if reduction < settings.rel_tol:
            break
    return theta, objective, iterations


def em_fit(k: int, samples, settings: EmSettings, rng: np.random.Generator) -> EmFitResult:
    """Best of ``settings.restarts`` EM runs for a k-component mixture.

    Returns an infeasible result when there are fewer weighted points than
    components, or when more than half of the restarts degenerate or end
    ill-conditioned.
    """
    data = _as_samples(samples)
    positive = data.positive()
    n_pos = positive.x.shape[0]
    if n_pos == 0:
        raise FitError("no effective samples")
    if n_pos < k:
        return EmFitResult(k=k, theta=None, objective=np.inf, reason=f"{n_pos} weighted samples for {k} components")

    global_cov = weighted_covariance(positive)
    scale = float(np.linalg.eigvalsh(global_cov)[-1])
    best = None
    ill = 0
    for restart, restart_rng in enumerate(rng.spawn(settings.restarts)):
        try:
            theta0 = _initial_theta(k, positive, global_cov, restart_rng)
            theta, objective, iterations = _run_restart(theta0, positive, settings)
        except (DegenerateComponentError, DensityError) as e:
            ill += 1
            logger.debug(f"k={k} restart {restart}: degenerate ({e})")
            continue
        if _is_ill_conditioned(theta, scale, settings.cond_threshold):
            ill += 1
            logger.debug(f"k={k} restart {restart}: ill-conditioned (cond={max_condition_number(theta):.3g})")
            continue
        logger.debug(f"k={k} restart {restart}: objective={objective:.6g} after {iterations} iterations")
        if best is None or objective < best[1]:
            best = (theta, objective, iterations)

    if ill * 2 > settings.restarts or best is None:
        return EmFitResult(
            k=k,
            theta=None,
            objective=np.inf,
            ill_conditioned=ill,
            restarts=settings.restarts,
            reason=f"{ill}/{settings.restarts} restarts ill-conditioned",
        )
    theta, objective, iterations = best
    return EmFitResult(
        k=k,
        theta=theta,
        objective=objective,
        iterations=iterations,
        ill_conditioned=ill,
        restarts=settings.restarts,
    )
