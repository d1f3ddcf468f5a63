"""Replication allocation across sampled inputs"""

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AllocationInput:
    """Likelihood ratios of one batch and the budget to spread over them"""

    weights: np.ndarray
    p_ref: float
    n_t: int
    m_t: int

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(weights) != self.m_t:
            raise ConfigError(f"{len(weights)} weights for m_t={self.m_t}")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ConfigError("Likelihood ratios must be finite and non-negative")
        object.__setattr__(self, "weights", weights)


def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def allocation_scores(alloc: AllocationInput) -> np.ndarray:
    """sqrt([w_i - p_ref]_+)"""
    return np.sqrt(np.maximum(alloc.weights - alloc.p_ref, 0.0))


def allocate_from_scores(scores: np.ndarray, n_t: int) -> np.ndarray:
    """Round n_t * score / sum(score) with a floor of one, then settle the rounding
    difference on the largest counts one unit at a time.

    Counts are visited largest first; equal counts go in order of score
    (smallest score loses first, largest gains first) and then by index.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    m_t = len(scores)
    if n_t < m_t:
        raise ConfigError(f"Budget n_t={n_t} is smaller than the {m_t} inputs")
    total = scores.sum()
    if total > 0.0:
        counts = np.maximum(1, round_half_away(n_t * scores / total)).astype(np.int64)
    else:
        counts = np.ones(m_t, dtype=np.int64)

    excess = int(counts.sum()) - n_t
    index = np.arange(m_t)
    if excess > 0:
        order = np.lexsort((index, scores, -counts))
        while excess > 0:
            for i in order:
                if excess == 0:
                    break
                if counts[i] > 1:
                    counts[i] -= 1
                    excess -= 1
    elif excess < 0:
        order = np.lexsort((index, -scores, -counts))
        while excess < 0:
            for i in order:
                if excess == 0:
                    break
                counts[i] += 1
                excess += 1
    return counts


def allocate(alloc: AllocationInput) -> np.ndarray:
    """Integer replication counts N_i >= 1 summing to n_t"""
    return allocate_from_scores(allocation_scores(alloc), alloc.n_t)


def allocation_diagnostics(alloc: AllocationInput) -> Dict[str, float]:
    """Summary of how well the large-budget approximation behind the scores applies"""
    clamped = alloc.weights <= alloc.p_ref
    positive = alloc.weights[alloc.weights > alloc.p_ref]
    if alloc.p_ref > 0 and len(positive):
        # s ~ p_ref / w, so (1 - s) / s ~ w / p_ref - 1
        ratio_bound = float(np.max(positive / alloc.p_ref - 1.0))
    else:
        ratio_bound = float("inf")
    return {
        "min_w": float(alloc.weights.min()),
        "max_w": float(alloc.weights.max()),
        "fraction_clamped": float(clamped.mean()),
        "max_odds": ratio_bound,
        "large_budget": bool(alloc.n_t > ratio_bound),
    }
