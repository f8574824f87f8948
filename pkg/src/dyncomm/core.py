"""Shared domain types, answer canonicalization, and task utility.

All types are immutable values after construction and safe to share across
concurrent episode workers.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

OPTION_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


class DyncommError(Exception):
    """Base class for every error raised by this package."""


class InvalidQueryError(DyncommError):
    pass


class ParseFailureError(DyncommError):
    """An agent's raw answer could not be mapped to any option."""


class ConfigurationError(DyncommError):
    pass


class ProtocolError(DyncommError):
    """An operation was invoked outside its legal episode phase."""


class ConsistencyError(DyncommError):
    """Internal episode state is incomplete or contradictory (a bug)."""


class MetricsError(DyncommError):
    pass


class TransportError(DyncommError):
    """An external backend could not be reached."""

    def __init__(self, message: str, retries_exhausted: bool = False):
        super().__init__(message)
        self.retries_exhausted = retries_exhausted


class EpisodeFailure(DyncommError):
    """The episode could not finish; callers drop it from batch gradients."""


@dataclass(frozen=True)
class Query:
    """One categorical question: option texts plus the gold option index."""

    id: str
    text: str
    options: tuple[str, ...]
    gold: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) < 2:
            raise InvalidQueryError(f"query {self.id!r}: needs at least 2 options")
        if len(set(self.options)) != len(self.options):
            raise InvalidQueryError(f"query {self.id!r}: option texts must be distinct")
        if not 0 <= self.gold < len(self.options):
            raise InvalidQueryError(
                f"query {self.id!r}: gold index {self.gold} out of range [0, {len(self.options)})"
            )

    @property
    def n_options(self) -> int:
        return len(self.options)


@dataclass(frozen=True)
class AgentSpec:
    """Static description of one agent in the pool.

    ``adversarial_transition_round`` is the round at which the agent turns
    adversarial; ``None`` means never. Per-episode schedules usually override
    this via the scheduler in :mod:`dyncomm.agents`.
    """

    index: int
    role: str
    backend: str = "synthetic"
    adversarial_transition_round: int | None = None

    def __post_init__(self) -> None:
        if self.backend not in ("synthetic", "http"):
            raise ConfigurationError(f"unknown agent backend {self.backend!r}")
        if self.adversarial_transition_round is not None and self.adversarial_transition_round < 2:
            raise ConfigurationError("adversarial transition round must be >= 2")


@dataclass(frozen=True, eq=False)
class AgentOutput:
    """One agent's per-round output: one-hot solution plus analysis embedding."""

    sol: np.ndarray
    ana: np.ndarray
    raw_text: str
    prompt_token_count: int

    def __post_init__(self) -> None:
        sol = np.asarray(self.sol, dtype=np.float64)
        ana = np.asarray(self.ana, dtype=np.float64)
        object.__setattr__(self, "sol", sol)
        object.__setattr__(self, "ana", ana)
        if sol.ndim != 1 or not np.isclose(sol.sum(), 1.0) or not set(np.unique(sol)) <= {0.0, 1.0}:
            raise ConsistencyError("sol must be a one-hot vector")
        if abs(float(np.linalg.norm(ana)) - 1.0) > 1e-6:
            raise ConsistencyError("ana must have unit L2 norm")
        if self.prompt_token_count < 0:
            raise ConsistencyError("prompt_token_count must be non-negative")
        sol.setflags(write=False)
        ana.setflags(write=False)

    @property
    def option(self) -> int:
        """Index of the chosen option."""
        return int(np.argmax(self.sol))


@dataclass(eq=False)
class Trajectory:
    """Actions, executed-action log-probabilities and reward of one episode.

    ``actions`` and ``logps`` cover rounds 2..T+1 (T entries); the last entry
    is the decision round. ``comm_graphs`` covers the communication rounds
    2..T only.
    """

    actions: list[np.ndarray]
    logps: list[float]
    comm_graphs: list
    decision_weights: np.ndarray
    final_answer: int
    reward: float

    def __post_init__(self) -> None:
        if len(self.actions) != len(self.logps):
            raise ConsistencyError("actions and logps must have equal length")
        if any(lp > 0.0 for lp in self.logps):
            raise ConsistencyError("log-probabilities must be <= 0")
        if not 0.0 <= self.reward <= 1.0:
            raise ConsistencyError("reward must lie in [0, 1]")


def one_hot(index: int, length: int) -> np.ndarray:
    v = np.zeros(length, dtype=np.float64)
    v[index] = 1.0
    return v


def compute_utility(final_answer: int, gold: int, n_options: int) -> float:
    """Task utility on the final answer: 1.0 iff it matches gold, else 0.0."""
    if not 0 <= final_answer < n_options:
        raise InvalidQueryError(f"final answer {final_answer} out of range [0, {n_options})")
    if not 0 <= gold < n_options:
        raise InvalidQueryError(f"gold {gold} out of range [0, {n_options})")
    return 1.0 if final_answer == gold else 0.0


def render_answer(option_index: int) -> str:
    """Canonical answer rendering; round-trips through canonicalize_answer."""
    return f"Answer: {OPTION_LETTERS[option_index]}"


# "Answer: B", "answer is (C)", "final answer: d." and similar.
_ANSWER_LETTER_RE = re.compile(
    r"\banswer\b\s*(?:is|:)?\s*[:\-]?\s*\(?([A-Za-z])\)?(?![A-Za-z])", re.IGNORECASE
)
# A bare leading letter such as "B", "B)", "(b):".
_LEADING_LETTER_RE = re.compile(r"^\s*\(?([A-Za-z])\)?\s*(?:[).:\-]|\s|$)")


def canonicalize_answer(raw_text: str, options: list[str] | tuple[str, ...]) -> int:
    """Map raw answer text to an option index.

    Matching is case-insensitive and deterministic: an explicit option letter
    wins, then a bare leading letter, then the longest option text contained
    in the answer (ties broken by lowest option index). Raises
    :class:`ParseFailureError` when nothing matches; callers substitute a
    uniform-random option drawn from the episode RNG so adversarial gibberish
    cannot halt an episode.
    """
    if not options:
        raise InvalidQueryError("options must be non-empty")
    n = len(options)

    for match in _ANSWER_LETTER_RE.finditer(raw_text):
        idx = OPTION_LETTERS.find(match.group(1).upper())
        if 0 <= idx < n:
            return idx

    match = _LEADING_LETTER_RE.match(raw_text)
    if match:
        idx = OPTION_LETTERS.find(match.group(1).upper())
        if 0 <= idx < n:
            return idx

    folded = raw_text.casefold()
    best: tuple[int, int] | None = None  # (-len, index) for min()
    for i, text in enumerate(options):
        if text.casefold() in folded:
            candidate = (-len(text), i)
            if best is None or candidate < best:
                best = candidate
    if best is not None:
        return best[1]

    raise ParseFailureError(f"could not map answer text to an option: {raw_text[:80]!r}")
