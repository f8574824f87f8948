"""Per-agent, per-round node feature construction.

Each agent's feature vector concatenates three blocks built from the
previous round's outputs and in-neighborhood:

  self       = [sol (k_max) | ana (d_emb) | sol_per | ana_per]
  neighbor   = [neighbor_sol (k_max) | neighbor_ana (d_emb) | has_neighbor
                | sol_disp | ana_disp]
  difference = [sol_agree | ana_agree | sol_dist | ana_dist]

sol_per is the dot product between the previous-round and round-1 one-hot
solutions; ana_per the cosine between the corresponding analysis vectors.
Neighbor aggregates are credit-weighted means over in-neighbors; sol_disp
is one minus the largest neighbor vote share, ana_disp the mean pairwise
cosine distance among neighbor analyses. Agreement compares the agent
against its (aggregated) neighborhood. With no in-neighbors the neighbor
and difference blocks are identically zero.

One-hot solutions are zero-padded to ``k_max`` so the layout is fixed
across queries with different option counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, ConsistencyError
from .embedding import cosine, normalize

# Scalar slots beyond the two padded one-hots and two embeddings:
# sol_per, ana_per, has_neighbor, sol_disp, ana_disp,
# sol_agree, ana_agree, sol_dist, ana_dist.
N_SCALAR_FEATURES = 9


@dataclass(frozen=True)
class FeatureLayout:
    k_max: int = 10
    d_emb: int = 384

    def __post_init__(self) -> None:
        if self.k_max < 2 or self.d_emb < 2:
            raise ConfigurationError("k_max and d_emb must be >= 2")

    @property
    def length(self) -> int:
        return 2 * self.k_max + 2 * self.d_emb + N_SCALAR_FEATURES

    @property
    def tag(self) -> str:
        """Version tag written into checkpoints to reject stale layouts."""
        return f"features-v1:k_max={self.k_max},d_emb={self.d_emb}"

    # Index helpers, used by tests and ablation masks.
    def slices(self) -> dict[str, slice]:
        k, d = self.k_max, self.d_emb
        offsets = {}
        pos = 0
        for name, width in [
            ("sol", k), ("ana", d), ("sol_per", 1), ("ana_per", 1),
            ("neighbor_sol", k), ("neighbor_ana", d), ("has_neighbor", 1),
            ("sol_disp", 1), ("ana_disp", 1),
            ("sol_agree", 1), ("ana_agree", 1), ("sol_dist", 1), ("ana_dist", 1),
        ]:
            offsets[name] = slice(pos, pos + width)
            pos += width
        return offsets


def _pad_sol(sol: np.ndarray, k_max: int) -> np.ndarray:
    if len(sol) > k_max:
        raise ConfigurationError(f"query has {len(sol)} options but k_max is {k_max}")
    out = np.zeros(k_max, dtype=np.float64)
    out[: len(sol)] = sol
    return out


def build_node_features(
    i: int,
    t: int,
    outputs_prev: list,
    graph_prev,
    credits_prev: np.ndarray,
    initial_outputs: list,
    layout: FeatureLayout,
) -> np.ndarray:
    """Feature vector for agent ``i`` entering round ``t`` (t >= 2).

    ``graph_prev`` is the communication graph of round t-1 (or ``None`` for
    t = 2, where round 1 had no communication) and ``credits_prev`` the
    round-(t-1) credit vector used to weight neighbor aggregates.
    """
    if t < 2:
        raise ConsistencyError("node features are defined for rounds t >= 2")
    own = outputs_prev[i]
    first = initial_outputs[i]
    if own is None or first is None:
        raise ConsistencyError(f"missing output for agent {i}")

    k = layout.k_max
    out = np.zeros(layout.length, dtype=np.float64)
    sl = layout.slices()

    sol = _pad_sol(own.sol, k)
    out[sl["sol"]] = sol
    out[sl["ana"]] = own.ana
    out[sl["sol_per"]] = float(np.dot(_pad_sol(first.sol, k), sol))
    out[sl["ana_per"]] = cosine(own.ana, first.ana)

    neighbors = [] if graph_prev is None else list(graph_prev.in_neighbors(i))
    if not neighbors:
        return out
    for j in neighbors:
        if outputs_prev[j] is None:
            raise ConsistencyError(f"missing output for in-neighbor {j}")

    weights = np.array([max(float(credits_prev[j]), 0.0) for j in neighbors])
    if weights.sum() == 0.0:
        weights = np.ones(len(neighbors))
    weights = weights / weights.sum()

    sols = np.stack([_pad_sol(outputs_prev[j].sol, k) for j in neighbors])
    anas = np.stack([outputs_prev[j].ana for j in neighbors])
    neighbor_sol = weights @ sols
    neighbor_ana = normalize(weights @ anas)

    out[sl["neighbor_sol"]] = neighbor_sol
    out[sl["neighbor_ana"]] = neighbor_ana
    out[sl["has_neighbor"]] = 1.0

    votes = np.argmax(sols, axis=1)
    shares = np.bincount(votes, minlength=k) / len(neighbors)
    out[sl["sol_disp"]] = 1.0 - float(shares.max())
    if len(neighbors) >= 2:
        sims = anas @ anas.T
        iu = np.triu_indices(len(neighbors), k=1)
        out[sl["ana_disp"]] = float(np.mean(1.0 - np.clip(sims[iu], -1.0, 1.0)))

    sol_agree = float(np.mean(votes == int(np.argmax(sol))))
    ana_agree = cosine(own.ana, neighbor_ana)
    out[sl["sol_agree"]] = sol_agree
    out[sl["ana_agree"]] = ana_agree
    out[sl["sol_dist"]] = 1.0 - sol_agree
    out[sl["ana_dist"]] = 1.0 - ana_agree
    return out


def build_all_features(
    t: int,
    outputs_prev: list,
    graph_prev,
    credits_prev: np.ndarray,
    initial_outputs: list,
    layout: FeatureLayout,
) -> np.ndarray:
    """Stack node features for all agents into an (N, L) matrix."""
    n = len(outputs_prev)
    return np.stack(
        [
            build_node_features(i, t, outputs_prev, graph_prev, credits_prev, initial_outputs, layout)
            for i in range(n)
        ]
    )
