"""Participation sampling and deterministic inference thresholding.

Training draws participation from Bernoulli(credits), flips each entry with
probability epsilon for exploration, and then computes the executed action's
log-probability under the unflipped Bernoulli policy — in exactly that
order. Inference selects agents whose credit strictly exceeds the mean
credit, falling back to the single highest-credit agent when every credit is
equal (the only case where the threshold selects nobody).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError
from .creditnet import CREDIT_CLAMP


@dataclass(frozen=True, eq=False)
class ParticipationAction:
    a: np.ndarray
    logp: float
    epsilon_used: float


def bernoulli_logp(credits: np.ndarray, a: np.ndarray) -> float:
    """Exact log-pmf of action ``a`` under independent Bernoulli(credits)."""
    probs = np.where(np.asarray(a) == 1, credits, 1.0 - credits)
    return float(np.sum(np.log(probs)))


def sample_participation(
    credits: np.ndarray, epsilon: float, rng: np.random.Generator
) -> ParticipationAction:
    credits = np.asarray(credits, dtype=np.float64)
    if credits.size == 0:
        raise ConfigurationError("credits must be non-empty")
    if np.any(credits < CREDIT_CLAMP - 1e-12) or np.any(credits > 1.0 - CREDIT_CLAMP + 1e-12):
        raise ConfigurationError("credits must be clamped to [delta, 1 - delta]")
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError("epsilon must lie in [0, 1]")
    a = (rng.random(credits.shape) < credits).astype(np.int8)
    flips = (rng.random(credits.shape) < epsilon).astype(np.int8)
    a = np.abs(a - flips).astype(np.int8)
    return ParticipationAction(a=a, logp=bernoulli_logp(credits, a), epsilon_used=epsilon)


def infer_participation(credits: np.ndarray) -> np.ndarray:
    credits = np.asarray(credits, dtype=np.float64)
    if credits.size == 0:
        raise ConfigurationError("credits must be non-empty")
    threshold = float(np.mean(credits))
    a = (credits > threshold).astype(np.int8)
    if not a.any():
        # Strict comparison against the mean is empty iff all credits are
        # equal; select the top credit with lowest-index tie-break.
        a = np.zeros_like(a)
        a[int(np.argmax(credits))] = 1
    return a


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_iterations``."""

    start: float = 0.1
    end: float = 0.01
    decay_iterations: int = 100

    def __post_init__(self) -> None:
        if not (0.0 <= self.end <= self.start <= 1.0):
            raise ConfigurationError("need 0 <= end <= start <= 1")
        if self.decay_iterations < 0:
            raise ConfigurationError("decay_iterations must be >= 0")

    def value(self, iteration: int) -> float:
        if self.decay_iterations == 0 or iteration >= self.decay_iterations:
            return self.end
        frac = iteration / self.decay_iterations
        return self.start + (self.end - self.start) * frac
