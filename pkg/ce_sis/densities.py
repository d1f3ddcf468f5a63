"""Input densities f and the Gaussian mixture candidate family q(x; theta)"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from .errors import DensityError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def as_points(x, dimension: int) -> np.ndarray:
    """Coerce x to an (n, p) array of points"""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dimension == 1 else arr.reshape(1, -1)
    if arr.shape[1] != dimension:
        raise DensityError(f"Expected points of dimension {dimension}, got shape {arr.shape}")
    return arr


class InputDensity(ABC):
    """The known density f from which inputs are drawn under crude Monte Carlo"""

    dimension: int = 1

    @abstractmethod
    def log_pdf(self, x) -> np.ndarray:
        """Log density at each of the (n, p) points"""

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw an (size, p) array"""

    @abstractmethod
    def quadrature_bounds(self) -> Tuple[float, float]:
        """Finite interval carrying all but a negligible tail (p = 1 only)"""

    @property
    def support(self) -> str:
        return "R^p"


class StandardNormalDensity(InputDensity):
    """Zero-mean, identity-covariance normal in p dimensions"""

    def __init__(self, dimension: int = 1):
        if dimension < 1:
            raise DensityError("dimension must be positive")
        self.dimension = dimension

    def log_pdf(self, x) -> np.ndarray:
        points = as_points(x, self.dimension)
        return -0.5 * np.sum(points**2, axis=1) - 0.5 * self.dimension * LOG_2PI

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.standard_normal((size, self.dimension))

    def quadrature_bounds(self) -> Tuple[float, float]:
        edge = float(stats.norm.isf(1e-15))
        return -edge, edge


class TruncatedRayleighDensity(InputDensity):
    """Rayleigh density restricted to [x_in, x_out] and renormalised.

    ``shape`` is the Rayleigh scale; the untruncated mean is shape * sqrt(pi / 2),
    so the default gives a mean wind speed of 10.
    """

    dimension = 1

    def __init__(self, shape: float = 10.0 * math.sqrt(2.0 / math.pi), x_in: float = 3.0, x_out: float = 25.0):
        if shape <= 0:
            raise DensityError("shape must be positive")
        if not 0.0 <= x_in < x_out:
            raise DensityError(f"Invalid truncation interval [{x_in}, {x_out}]")
        self.shape = shape
        self.x_in = x_in
        self.x_out = x_out
        self._base = stats.rayleigh(scale=shape)
        self._cdf_in = float(self._base.cdf(x_in))
        self._cdf_out = float(self._base.cdf(x_out))
        self._log_mass = math.log(self._cdf_out - self._cdf_in)

    def log_pdf(self, x) -> np.ndarray:
        points = as_points(x, 1)[:, 0]
        inside = (points >= self.x_in) & (points <= self.x_out)
        out = np.full(points.shape, -np.inf)
        out[inside] = self._base.logpdf(points[inside]) - self._log_mass
        return out

    def cdf(self, x) -> np.ndarray:
        points = np.clip(as_points(x, 1)[:, 0], self.x_in, self.x_out)
        return (self._base.cdf(points) - self._cdf_in) / (self._cdf_out - self._cdf_in)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.uniform(self._cdf_in, self._cdf_out, size)
        return self._base.ppf(u).reshape(-1, 1)

    def quadrature_bounds(self) -> Tuple[float, float]:
        return self.x_in, self.x_out

    @property
    def support(self) -> str:
        return f"[{self.x_in}, {self.x_out}]"


INPUT_DENSITIES = {
    "standard_normal": StandardNormalDensity,
    "truncated_rayleigh": TruncatedRayleighDensity,
}


def get_input_density(name: str, **kwargs) -> InputDensity:
    try:
        return INPUT_DENSITIES[name](**kwargs)
    except KeyError:
        available = ", ".join(sorted(INPUT_DENSITIES))
        raise KeyError(f"Unknown input density '{name}'. Available: {available}") from None


def _cholesky_with_jitter(sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of sigma, retrying once with 1e-9 * trace / p on the diagonal"""
    try:
        return sigma, np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    p = sigma.shape[0]
    jitter = 1e-9 * np.trace(sigma) / p
    jittered = sigma + jitter * np.eye(p)
    try:
        chol = np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError:
        raise DensityError("Covariance is not positive definite after jitter") from None
    if not np.all(np.isfinite(chol)) or np.any(np.diag(chol) <= 0.0):
        raise DensityError("Covariance is not positive definite after jitter")
    logger.debug(f"Added jitter {jitter:.3e} to a covariance")
    return jittered, chol


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Mixture weights, component means and covariances of q(x; theta)"""

    alpha: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        mu = np.array(self.mu, dtype=float)
        if mu.ndim == 1:
            mu = mu.reshape(len(alpha), -1)
        k, p = mu.shape
        sigma = np.array(self.sigma, dtype=float).reshape(k, p, p)

        if len(alpha) != k or k < 1:
            raise DensityError(f"alpha has {len(alpha)} entries but there are {k} components")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
            raise DensityError(f"Mixture weights must be positive, got {alpha}")
        if abs(alpha.sum() - 1.0) > 1e-8:
            raise DensityError(f"Mixture weights must sum to 1, got {alpha.sum()!r}")
        alpha = alpha / alpha.sum()
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
            raise DensityError("Means and covariances must be finite")

        chol = np.empty_like(sigma)
        for j in range(k):
            if not np.allclose(sigma[j], sigma[j].T, rtol=1e-10, atol=1e-12):
                raise DensityError(f"Covariance of component {j} is not symmetric")
            sigma[j], chol[j] = _cholesky_with_jitter(0.5 * (sigma[j] + sigma[j].T))

        for arr in (alpha, mu, sigma, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "chol", chol)

    @property
    def k(self) -> int:
        return len(self.alpha)

    @property
    def p(self) -> int:
        return self.mu.shape[1]

    @classmethod
    def single(cls, mu, sigma) -> "GmmParams":
        """One-component mixture; ``sigma`` may be a matrix, a vector of variances or a scalar"""
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        p = len(mu)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = sigma * np.eye(p)
        elif sigma.ndim == 1:
            sigma = np.diag(sigma)
        return cls(alpha=np.ones(1), mu=mu.reshape(1, p), sigma=sigma.reshape(1, p, p))

    def component_log_pdf(self, x) -> np.ndarray:
        """(n, k) array of log N(x_i; mu_j, sigma_j)"""
        points = as_points(x, self.p)
        out = np.empty((points.shape[0], self.k))
        for j in range(self.k):
            z = linalg.solve_triangular(self.chol[j], (points - self.mu[j]).T, lower=True)
            log_det = 2.0 * np.sum(np.log(np.diag(self.chol[j])))
            out[:, j] = -0.5 * (np.sum(z**2, axis=0) + log_det + self.p * LOG_2PI)
        return out

    def log_pdf(self, x) -> np.ndarray:
        return logsumexp(self.component_log_pdf(x) + np.log(self.alpha), axis=1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        components = rng.choice(self.k, size=size, p=self.alpha)
        z = rng.standard_normal((size, self.p))
        return self.mu[components] + np.einsum("nij,nj->ni", self.chol[components], z)

    def condition_numbers(self) -> np.ndarray:
        eig = np.array([np.linalg.eigvalsh(s) for s in self.sigma])
        return eig[:, -1] / eig[:, 0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "alpha": self.alpha.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GmmParams":
        theta = cls(alpha=data["alpha"], mu=data["mu"], sigma=data["sigma"])
        if "k" in data and int(data["k"]) != theta.k:
            raise DensityError(f"k={data['k']} does not match {theta.k} components")
        return theta


def gmm_log_pdf(theta: GmmParams, x) -> np.ndarray:
    """log q(x; theta) at each of the (n, p) points"""
    return theta.log_pdf(x)


def gmm_pdf(theta: GmmParams, x) -> np.ndarray:
    """sum_j alpha_j N(x; mu_j, sigma_j), evaluated in log space"""
    return theta.pdf(x)


def gmm_sample(theta: GmmParams, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Pick component j with probability alpha_j, then draw through its Cholesky factor"""
    return theta.sample(rng, size)


def param_dimension(k: int, p: int) -> int:
    """Free parameters of a k-component GMM in p dimensions"""
    if k < 1 or p < 1:
        raise ValueError("k and p must be positive")
    return (k - 1) + k * (p + p * (p + 1) // 2)


def max_condition_number(theta: GmmParams) -> float:
    """Largest eigenvalue ratio over the component covariances"""
    return float(np.max(theta.condition_numbers()))
