"""Task accuracy, adversary-detection accuracy, and token accounting."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import MetricsError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EpisodeMetrics:
    correct: bool
    tokens_per_agent_round: float
    predicted_reliable: np.ndarray
    true_adversarial: np.ndarray

    def __post_init__(self) -> None:
        if len(self.predicted_reliable) != len(self.true_adversarial):
            raise MetricsError("prediction/truth vectors must have equal length")


def accuracy(results: list[EpisodeMetrics]) -> float:
    """Fraction of episodes answered correctly."""
    if not results:
        raise MetricsError("accuracy undefined over zero episodes")
    return sum(1 for r in results if r.correct) / len(results)


def adacc(predicted_reliable: np.ndarray, true_adversarial: np.ndarray) -> float:
    """Adversary detection accuracy.

    An agent is predicted adversarial iff it was excluded from the decision
    set (decision-round participation indicator 0); truth is whether the
    agent was scheduled adversarial in the episode.
    """
    predicted_reliable = np.asarray(predicted_reliable)
    true_adversarial = np.asarray(true_adversarial)
    if predicted_reliable.shape != true_adversarial.shape:
        raise MetricsError("prediction/truth vectors must have equal length")
    predicted_adversarial = 1 - predicted_reliable
    return float(np.mean(predicted_adversarial == true_adversarial))


def mean_adacc(results: list[EpisodeMetrics]) -> float:
    if not results:
        raise MetricsError("adacc undefined over zero episodes")
    return float(np.mean([adacc(r.predicted_reliable, r.true_adversarial) for r in results]))


def token_count(prompt: str, backend: str = "synthetic", reported: int | None = None) -> int:
    """Prompt token count: API-reported for http, whitespace proxy otherwise."""
    if backend == "http":
        if reported is not None:
            return int(reported)
        logger.debug("missing API token usage; falling back to whitespace proxy")
    return len(prompt.split())
