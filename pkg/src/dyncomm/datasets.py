"""Dataset ingestion and synthetic query generation.

Datasets are JSON-lines files with one object per query:

    {"id": "q1", "question": "...", "options": ["...", ...],
     "answer": 2}            # or an option letter such as "C"
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .core import ConfigurationError, InvalidQueryError, OPTION_LETTERS, Query

logger = logging.getLogger(__name__)


def _parse_answer(answer, n_options: int) -> int:
    if isinstance(answer, bool):
        raise InvalidQueryError("answer must be an index or option letter")
    if isinstance(answer, int):
        return answer
    if isinstance(answer, str):
        text = answer.strip().upper()
        if len(text) == 1 and text in OPTION_LETTERS[:n_options]:
            return OPTION_LETTERS.index(text)
        if text.isdigit():
            return int(text)
    raise InvalidQueryError(f"unrecognized answer field: {answer!r}")


def load_dataset(path: str | Path) -> list[Query]:
    """Load and validate queries, reporting malformed lines by number."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"dataset file not found: {path}")
    queries: list[Query] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                options = obj["options"]
                gold = _parse_answer(obj["answer"], len(options))
                queries.append(
                    Query(
                        id=str(obj["id"]),
                        text=str(obj["question"]),
                        options=tuple(str(o) for o in options),
                        gold=gold,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, InvalidQueryError) as exc:
                logger.warning("%s line %d rejected: %s", path, lineno, exc)
    if not queries:
        raise ConfigurationError(f"dataset {path} contains no valid queries")
    return queries


def synthetic_queries(
    n: int, seed: int = 0, k_min: int = 4, k_max: int = 10
) -> list[Query]:
    """Generate calibration queries for the offline synthetic environment.

    Option texts are placeholders; the synthetic agent pool reacts only to
    the gold index and the adversary schedule, never to the wording.
    """
    if not 2 <= k_min <= k_max:
        raise ConfigurationError("need 2 <= k_min <= k_max")
    rng = np.random.default_rng(seed)
    queries = []
    for i in range(n):
        k = int(rng.integers(k_min, k_max + 1))
        gold = int(rng.integers(k))
        options = tuple(f"candidate statement {OPTION_LETTERS[j]}{i}" for j in range(k))
        queries.append(
            Query(
                id=f"syn-{seed}-{i}",
                text=f"Calibration item {i}: which candidate statement is marked correct?",
                options=options,
                gold=gold,
            )
        )
    return queries


def write_dataset(queries: list[Query], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(
                json.dumps(
                    {"id": q.id, "question": q.text, "options": list(q.options), "answer": q.gold},
                    sort_keys=True,
                )
                + "\n"
            )
