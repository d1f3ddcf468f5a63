"""Failure-probability estimators and the quantities plugged into them"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List

import numpy as np
from scipy import integrate

from .densities import GmmParams, InputDensity, as_points
from .errors import OracleError
from .models import OracleModel
from .weighted_em import WeightedSamples

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SimRecord:
    """One distinct input with its replications and frozen weights"""

    x: np.ndarray
    iteration: int
    w: float
    n_reps: int
    failures: int
    v: float

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if not 0 <= self.failures <= self.n_reps:
            raise ValueError(f"failures={self.failures} outside [0, {self.n_reps}]")
        if self.w < 0 or self.v < 0:
            raise ValueError("weights must be non-negative")


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Batch:
    """All records drawn at one CE iteration together with the theta they were drawn from"""

    iteration: int
    theta: GmmParams
    x: np.ndarray
    w: np.ndarray
    n_reps: np.ndarray
    failures: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        w = _frozen(self.w, float).reshape(-1)
        m = len(w)
        x = np.array(self.x, dtype=float).reshape(m, -1)
        x.setflags(write=False)
        n_reps = _frozen(self.n_reps, np.int64).reshape(-1)
        failures = _frozen(self.failures, np.int64).reshape(-1)
        v = _frozen(self.v, float).reshape(-1)
        if m == 0:
            raise ValueError("A batch needs at least one record")
        if not (len(n_reps) == len(failures) == len(v) == m):
            raise ValueError("Batch columns have different lengths")
        if np.any(n_reps < 1):
            raise ValueError("Every input needs at least one replication")
        if np.any(failures < 0) or np.any(failures > n_reps):
            raise ValueError("failures must lie in [0, n_reps]")
        if np.any(w < 0) or np.any(v < 0):
            raise ValueError("weights must be non-negative")
        for name, arr in (("x", x), ("w", w), ("n_reps", n_reps), ("failures", failures), ("v", v)):
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return len(self.w)

    @property
    def simulations(self) -> int:
        return int(self.n_reps.sum())

    @property
    def s_hat(self) -> np.ndarray:
        return self.failures / self.n_reps

    def records(self) -> List[SimRecord]:
        return [
            SimRecord(
                x=self.x[i],
                iteration=self.iteration,
                w=float(self.w[i]),
                n_reps=int(self.n_reps[i]),
                failures=int(self.failures[i]),
                v=float(self.v[i]),
            )
            for i in range(self.m)
        ]


@dataclass
class Dataset:
    """Aggregated batches from iterations 0..t; batches are append-only"""

    batches: List[Batch] = field(default_factory=list)

    def append(self, batch: Batch) -> None:
        if batch.iteration != len(self.batches):
            raise ValueError(f"Expected iteration {len(self.batches)}, got {batch.iteration}")
        self.batches.append(batch)

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)

    @property
    def total_m(self) -> int:
        return sum(batch.m for batch in self.batches)

    @property
    def n_positive(self) -> int:
        """Records with h_hat > 0, i.e. at least one observed failure"""
        return sum(int(np.count_nonzero(batch.v > 0.0)) for batch in self.batches)

    @property
    def dimension(self) -> int:
        return self.batches[0].x.shape[1]

    def weighted_samples(self) -> WeightedSamples:
        return WeightedSamples(
            x=np.vstack([batch.x for batch in self.batches]),
            v=np.concatenate([batch.v for batch in self.batches]),
            total_count=self.total_m,
        )


def s_hat(record: SimRecord) -> float:
    """Empirical exceedance frequency at one input"""
    return record.failures / record.n_reps


def h_hat(s_hat, n_total: int):
    """sqrt(s (1 - s) / n + s^2); works on scalars and arrays"""
    if n_total < 1:
        raise ValueError("n_total must be positive")
    s = np.asarray(s_hat, dtype=float)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError("s_hat must lie in [0, 1]")
    value = np.sqrt(s * (1.0 - s) / n_total + s * s)
    return float(value) if value.ndim == 0 else value


def p_hat_sis(batch: Batch) -> float:
    """Single-iteration SIS estimator: mean over inputs of s_hat * w"""
    return float(np.mean(batch.s_hat * batch.w))


def p_bar_sis(dataset: Dataset) -> float:
    """Aggregated estimator: the average of the per-iteration SIS estimates"""
    if len(dataset) == 0:
        raise ValueError("Dataset is empty")
    return float(np.mean([p_hat_sis(batch) for batch in dataset]))


def p_dis(indicators, w) -> float:
    """Deterministic-model IS estimator: mean of I(y > l) * w"""
    indicators = np.asarray(indicators, dtype=float)
    return float(np.mean(indicators * np.asarray(w, dtype=float)))


def p_cmc(failures: int, n: int) -> float:
    """Crude Monte Carlo estimator"""
    if n < 1 or not 0 <= failures <= n:
        raise ValueError(f"Invalid counts: {failures} failures out of {n}")
    return failures / n


def cmc_ratio(n_used: int, se: float, p_ref: float) -> float:
    """Fraction of the crude Monte Carlo budget needed for the same standard error"""
    if not 0.0 < p_ref < 1.0:
        raise ValueError("p_ref must lie in (0, 1)")
    if se < 0:
        raise ValueError("se must be non-negative")
    return n_used * se * se / (p_ref * (1.0 - p_ref))


def optimal_allocation_exact(s_values, n: int) -> np.ndarray:
    """Variance-optimal real-valued replication counts for known s(X_i).

    Terms at s = 1 take their limit 0; if every term vanishes the
    allocation is uniform.
    """
    s = np.asarray(s_values, dtype=float).reshape(-1)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError("s values must lie in [0, 1]")
    terms = np.sqrt(n * (1.0 - s) / (1.0 + (n - 1.0) * s))
    total = terms.sum()
    if total <= 0.0:
        return np.full(len(s), n / len(s))
    return n * terms / total


class OptimalSisDensity:
    """Tabulated variance-optimal SIS input density for a 1-D oracle model.

    The unnormalised density f(x) * h(x) is evaluated on an adaptively refined
    grid; sampling inverts the piecewise-linear CDF of the table, and ``pdf``
    returns the matching piecewise-constant density so importance weights are
    exact for the sampler.
    """

    def __init__(self, grid: np.ndarray, unnormalized: np.ndarray, normalizer: float, f: InputDensity):
        self.grid = grid
        self.values = unnormalized / normalizer
        self.normalizer = normalizer
        self.f = f
        steps = np.diff(grid)
        cdf = np.concatenate([[0.0], integrate.cumulative_trapezoid(unnormalized, grid)])
        self.cdf = cdf / cdf[-1]
        self.cell_density = np.diff(self.cdf) / steps

    @property
    def dimension(self) -> int:
        return 1

    def pdf(self, x) -> np.ndarray:
        points = as_points(x, 1)[:, 0]
        idx = np.searchsorted(self.grid, points, side="right") - 1
        inside = (idx >= 0) & (idx < len(self.cell_density))
        out = np.zeros(points.shape)
        out[inside] = self.cell_density[idx[inside]]
        return out

    def log_pdf(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(x))

    def smooth_pdf(self, x) -> np.ndarray:
        """Linear interpolation of the normalised table"""
        points = as_points(x, 1)[:, 0]
        return np.interp(points, self.grid, self.values, left=0.0, right=0.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.uniform(0.0, 1.0, size)
        return np.interp(u, self.cdf, self.grid).reshape(-1, 1)


def _refine_grid(fun, lo: float, hi: float, initial: int, rel_tol: float, max_rounds: int, abs_floor: float = 1e-3):
    """Halve every interval whose midpoint misses linear interpolation by more than rel_tol of its own value.

    Values below abs_floor times the peak only need rel_tol * abs_floor * peak.
    """
    grid = np.linspace(lo, hi, initial)
    values = fun(grid)
    for _ in range(max_rounds):
        mids = 0.5 * (grid[:-1] + grid[1:])
        mid_values = fun(mids)
        scale = max(values.max(), mid_values.max())
        error = np.abs(mid_values - 0.5 * (values[:-1] + values[1:]))
        refine = error > rel_tol * np.maximum(np.abs(mid_values), abs_floor * scale)
        if not np.any(refine):
            break
        grid = np.concatenate([grid, mids[refine]])
        values = np.concatenate([values, mid_values[refine]])
        order = np.argsort(grid)
        grid, values = grid[order], values[order]
    return grid, values


def optimal_sis_density_1d(
    model: OracleModel,
    f: InputDensity,
    l: float,
    n: int,
    initial_points: int = 4097,
    rel_tol: float = 1e-6,
    max_rounds: int = 12,
) -> OptimalSisDensity:
    """Tabulate and normalise f(x) * sqrt(s(1 - s) / n + s^2) for p = 1"""
    if f.dimension != 1 or model.input_dimension != 1:
        raise OracleError("The tabulated optimal density is only available for p = 1")
    lo, hi = f.quadrature_bounds()

    def unnormalized(x):
        s = np.asarray(model.true_s(x, l), dtype=float)
        return f.pdf(x) * np.sqrt(s * (1.0 - s) / n + s * s)

    grid, values = _refine_grid(unnormalized, lo, hi, initial_points, rel_tol, max_rounds)
    normalizer, abserr = integrate.quad(
        lambda t: float(unnormalized(np.array([t]))[0]),
        lo,
        hi,
        points=grid[:: max(1, len(grid) // 50)][1:-1],
        limit=2000,
        epsabs=1e-12,
        epsrel=1e-9,
    )
    trapezoid = float(integrate.trapezoid(values, grid))
    if normalizer <= 0.0 or not np.isfinite(normalizer):
        raise OracleError("Optimal density has no mass")
    if abserr > 1e-6 * normalizer or abs(trapezoid - normalizer) > 1e-4 * normalizer:
        raise OracleError(
            f"Normalising quadrature did not converge (C_q={normalizer:.6g}, err={abserr:.2g}, table={trapezoid:.6g})"
        )
    logger.debug(f"Tabulated optimal SIS density on {len(grid)} points, C_q={normalizer:.6g}")
    return OptimalSisDensity(grid, values, normalizer, f)
