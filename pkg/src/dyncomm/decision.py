"""Decision-round weighting and credit-weighted voting.

Decision weights are the softmax of the decision-round credits with
unselected agents zeroed out and the remainder renormalized; since the vote
is an argmax, the final answer is invariant to the renormalization, so the
alternative reading (softmax over the selected subset only) is exposed as a
flag but changes nothing observable at the vote.
"""

from __future__ import annotations

import numpy as np

from .core import ConfigurationError, ProtocolError


def decision_weights(
    credits: np.ndarray, a: np.ndarray, over_selected_only: bool = False
) -> np.ndarray:
    """Simplex weights over agents; zero for everyone outside the decision set."""
    credits = np.asarray(credits, dtype=np.float64)
    a = np.asarray(a)
    if credits.shape != a.shape:
        raise ConfigurationError("credits and selection vector must have equal length")
    selected = a == 1
    if not selected.any():
        raise ProtocolError("decision set is empty; the policy must prevent this upstream")
    if over_selected_only:
        shifted = credits[selected] - credits[selected].max()
        exp = np.exp(shifted)
        weights = np.zeros_like(credits)
        weights[selected] = exp / exp.sum()
        return weights
    shifted = credits - credits.max()
    exp = np.exp(shifted)
    weights = exp / exp.sum()
    weights[~selected] = 0.0
    return weights / weights.sum()


def aggregate_vote(sols: list[np.ndarray], weights: np.ndarray) -> int:
    """Weighted vote over one-hot solutions; ties go to the lowest option index."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(sols) != len(weights):
        raise ConfigurationError("one solution vector per weight required")
    if np.any(weights < 0):
        raise ConfigurationError("weights must be non-negative")
    scores = np.zeros(len(sols[0]), dtype=np.float64)
    for sol, w in zip(sols, weights):
        scores += w * np.asarray(sol, dtype=np.float64)
    return int(np.argmax(scores))
