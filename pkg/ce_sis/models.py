"""Stochastic simulation models: input X -> random output Y"""

import logging
import math
from abc import ABC, abstractmethod
from typing import Callable, Dict, Tuple, Type, Union

import numpy as np
from scipy import stats

from .errors import InputError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class SimulationModel(ABC):
    """A simulator whose output is random even at a fixed input.

    All internal noise is drawn from the Generator passed to ``simulate``;
    the same Generator state and input always give the same output.
    """

    input_dimension: int = 1

    @abstractmethod
    def simulate(self, x: np.ndarray, rng: np.random.Generator) -> float:
        """Draw one output Y | X = x"""

    def simulate_batch(self, x: np.ndarray, n_reps: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n_reps`` i.i.d. outputs at the same input"""
        return np.array([self.simulate(x, rng) for _ in range(n_reps)], dtype=float)


class OracleModel(SimulationModel):
    """A model whose exceedance probability s(x) = P(Y > l | X = x) is known"""

    @abstractmethod
    def true_s(self, x: ArrayLike, l: float) -> ArrayLike:
        """Closed-form conditional exceedance probability"""


def _check_finite(x: ArrayLike, name: str = "x") -> None:
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} must be finite, got {x!r}")


def _scalar_input(x) -> float:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.size != 1:
        raise InputError(f"Expected a scalar input, got shape {np.shape(x)}")
    return float(arr[0])


def mu_sigma(x: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """Mean and standard deviation of the numerical example, vectorised"""
    _check_finite(x)
    x = np.asarray(x, dtype=float)
    mu = 0.95 * x**2 * (1.0 + 0.5 * np.cos(5.0 * x) + 0.5 * np.cos(10.0 * x))
    sigma = 1.0 + 0.7 * np.abs(x) + 0.4 * np.cos(x) + 0.3 * np.cos(14.0 * x)
    if np.any(sigma <= 0.0):
        raise InputError(f"Non-positive standard deviation at x={x!r}")
    return mu, sigma


def eval_mu_sigma(x: float) -> Tuple[float, float]:
    """Scalar (mu(x), sigma(x)) of the numerical example"""
    if not math.isfinite(x):
        raise InputError(f"x must be finite, got {x!r}")
    mu = 0.95 * x * x * (1.0 + 0.5 * math.cos(5.0 * x) + 0.5 * math.cos(10.0 * x))
    sigma = 1.0 + 0.7 * abs(x) + 0.4 * math.cos(x) + 0.3 * math.cos(14.0 * x)
    assert sigma > 0.0, f"sigma({x}) = {sigma} is not positive"
    return mu, sigma


def simulate_numerical_example(x: float, rng: np.random.Generator) -> float:
    """y = mu(x) + sigma(x) * Z with Z a standard normal draw from ``rng``"""
    mu, sigma = eval_mu_sigma(x)
    return mu + sigma * rng.standard_normal()


def true_s_numerical_example(x: ArrayLike, l: float) -> ArrayLike:
    """1 - Phi((l - mu(x)) / sigma(x))"""
    _check_finite(l, "l")
    mu, sigma = mu_sigma(x)
    s = stats.norm.sf((l - mu) / sigma)
    return float(s) if np.ndim(s) == 0 else s


class NumericalExampleModel(OracleModel):
    """One-dimensional heteroscedastic Gaussian simulator with a closed-form s(x)"""

    input_dimension = 1

    def simulate(self, x: np.ndarray, rng: np.random.Generator) -> float:
        return simulate_numerical_example(_scalar_input(x), rng)

    def simulate_batch(self, x: np.ndarray, n_reps: int, rng: np.random.Generator) -> np.ndarray:
        mu, sigma = eval_mu_sigma(_scalar_input(x))
        return mu + sigma * rng.standard_normal(n_reps)

    def true_s(self, x: ArrayLike, l: float) -> ArrayLike:
        return true_s_numerical_example(x, l)


class DeterministicModel(OracleModel):
    """Wraps a deterministic response Y = g(X); the stream is never consumed"""

    def __init__(self, g: Callable[[np.ndarray], float], input_dimension: int = 1):
        self.g = g
        self.input_dimension = input_dimension

    def simulate(self, x: np.ndarray, rng: np.random.Generator) -> float:
        return float(self.g(np.asarray(x, dtype=float)))

    def true_s(self, x: ArrayLike, l: float) -> ArrayLike:
        points = np.asarray(x, dtype=float)
        if points.ndim == 0 or (self.input_dimension > 1 and points.ndim == 1):
            return float(self.g(np.atleast_1d(points)) > l)
        rows = points.reshape(-1, self.input_dimension)
        return np.array([float(self.g(row) > l) for row in rows])


MODEL_REGISTRY: Dict[str, Type[SimulationModel]] = {}


def register_model(name: str):
    """Class decorator adding a model to the name registry used by config files"""

    def decorator(cls: Type[SimulationModel]) -> Type[SimulationModel]:
        if name in MODEL_REGISTRY and MODEL_REGISTRY[name] is not cls:
            logger.warning(f"Replacing registered model '{name}'")
        MODEL_REGISTRY[name] = cls
        return cls

    return decorator


def get_model(name: str, **kwargs) -> SimulationModel:
    """Instantiate a registered model by name"""
    try:
        cls = MODEL_REGISTRY[name]
    except KeyError:
        available = ", ".join(sorted(MODEL_REGISTRY))
        raise KeyError(f"Unknown model '{name}'. Available: {available}") from None
    return cls(**kwargs)


register_model("numerical_example")(NumericalExampleModel)
