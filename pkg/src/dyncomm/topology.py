"""Credit-ranked DAG construction and topological round execution.

Graphs are built by iterating sender/receiver pairs in descending credit
order (ties broken by ascending agent index) and adding each directed edge
unless it violates the edge mask, a degree budget, or acyclicity. With no
mask or budgets this yields the tournament DAG: an edge from every
higher-credit agent to every lower-credit agent.

Round execution visits nodes in topological order so each agent sees the
current-round messages of its in-neighbors; agents outside the selection
carry their previous output forward unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AgentOutput, AgentSpec, ConfigurationError, Query
from .agents import AdversarySchedule, render_agent_prompt, render_peer_message


@dataclass(frozen=True, eq=False)
class EdgeConstraints:
    """Edge mask plus optional out/in degree budgets.

    ``mask[i, j] == 1`` permits the directed edge i -> j; ``None`` permits
    every pair. Self-loops are always forbidden regardless of the mask.
    """

    mask: np.ndarray | None = None
    b_out: int | None = None
    b_in: int | None = None

    def __post_init__(self) -> None:
        if self.b_out is not None and self.b_out < 1:
            raise ConfigurationError("b_out must be positive when set")
        if self.b_in is not None and self.b_in < 1:
            raise ConfigurationError("b_in must be positive when set")
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
                raise ConfigurationError("mask must be a square matrix")
            object.__setattr__(self, "mask", mask)

    def allows(self, i: int, j: int) -> bool:
        return self.mask is None or bool(self.mask[i, j])


NO_CONSTRAINTS = EdgeConstraints()


@dataclass(frozen=True, eq=False)
class CommGraph:
    """Directed acyclic communication structure for one round."""

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    topo_order: tuple[int, ...]

    def in_neighbors(self, j: int) -> list[int]:
        return [a for a, b in self.edges if b == j]

    def out_neighbors(self, i: int) -> list[int]:
        return [b for a, b in self.edges if a == i]

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def would_create_cycle(edges: list[tuple[int, int]], i: int, j: int) -> bool:
    """True iff adding i -> j closes a cycle, i.e. j already reaches i."""
    if i == j:
        return True
    adjacency: dict[int, list[int]] = {}
    for a, b in edges:
        adjacency.setdefault(a, []).append(b)
    stack = [j]
    seen = {j}
    while stack:
        node = stack.pop()
        if node == i:
            return True
        for nxt in adjacency.get(node, ()):  # depth-first reachability
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return False


def _topo_order(nodes: list[int], edges: list[tuple[int, int]], rank: dict[int, int]) -> tuple[int, ...]:
    """Kahn's algorithm, breaking ties by credit rank for determinism."""
    indeg = dict.fromkeys(nodes, 0)
    for _, b in edges:
        indeg[b] += 1
    order: list[int] = []
    ready = sorted((n for n in nodes if indeg[n] == 0), key=lambda n: rank[n])
    while ready:
        node = ready.pop(0)
        order.append(node)
        changed = False
        for a, b in edges:
            if a == node:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
                    changed = True
        if changed:
            ready.sort(key=lambda n: rank[n])
    if len(order) != len(nodes):
        raise ConfigurationError("constructed graph is not acyclic")  # unreachable by construction
    return tuple(order)


def build_comm_graph(
    credits: np.ndarray,
    a: np.ndarray,
    constraints: EdgeConstraints = NO_CONSTRAINTS,
    ranked: bool = True,
) -> CommGraph:
    """Deterministic credit-prioritized DAG over the selected agents.

    ``ranked=False`` is the fixed-agent-order ablation: construction iterates
    agents by index instead of by descending credit.
    """
    credits = np.asarray(credits, dtype=np.float64)
    a = np.asarray(a)
    if credits.shape != a.shape:
        raise ConfigurationError("credits and participation vector must have equal length")
    selected = [i for i in range(len(a)) if a[i] == 1]
    if ranked:
        ordered = sorted(selected, key=lambda i: (-credits[i], i))
    else:
        ordered = sorted(selected)
    rank = {node: pos for pos, node in enumerate(ordered)}

    edges: list[tuple[int, int]] = []
    d_out = dict.fromkeys(selected, 0)
    d_in = dict.fromkeys(selected, 0)
    for vi in ordered:
        for vj in ordered:
            if vi == vj:
                continue
            if not constraints.allows(vi, vj):
                continue
            if constraints.b_out is not None and d_out[vi] >= constraints.b_out:
                continue
            if constraints.b_in is not None and d_in[vj] >= constraints.b_in:
                continue
            if would_create_cycle(edges, vi, vj):
                continue
            edges.append((vi, vj))
            d_out[vi] += 1
            d_in[vj] += 1

    return CommGraph(
        nodes=tuple(ordered),
        edges=tuple(edges),
        topo_order=_topo_order(ordered, edges, rank),
    )


def baseline_graph(kind: str, n: int, p_edge: float = 0.5,
                   rng: np.random.Generator | None = None) -> CommGraph:
    """Static presets: the acyclic orientation of the complete graph, or a
    random subgraph of it keeping each edge with probability ``p_edge``."""
    if kind not in ("complete", "random"):
        raise ConfigurationError(f"unknown baseline graph kind {kind!r}")
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if kind == "random":
        if rng is None:
            raise ConfigurationError("random baseline graph requires an rng")
        pairs = [p for p in pairs if rng.random() < p_edge]
    return CommGraph(nodes=tuple(range(n)), edges=tuple(pairs), topo_order=tuple(range(n)))


def execute_round(
    graph: CommGraph,
    q: Query,
    outputs_prev: list[AgentOutput],
    agents: list[AgentSpec],
    backend,
    round_index: int,
    episode_id: int,
    schedule: AdversarySchedule,
) -> list[AgentOutput]:
    """Run one communication round over the graph.

    Selected agents are prompted in topological order with the query plus
    the fresh messages of their direct in-neighbors; everyone else carries
    the previous output forward. Returns the full output vector.
    """
    outputs = list(outputs_prev)
    in_lists = {j: [] for j in graph.nodes}
    for sender, receiver in graph.edges:
        in_lists[receiver].append(sender)
    position = {node: pos for pos, node in enumerate(graph.topo_order)}
    for node in graph.topo_order:
        senders = sorted(in_lists[node], key=lambda s: position[s])
        messages = [render_peer_message(outputs[s], agents[s].role) for s in senders]
        prompt = render_agent_prompt(q, messages)
        n_adv_in = sum(1 for s in senders if schedule.is_adversarial(s, round_index))
        outputs[node] = backend.respond(
            agents[node], q, prompt, round_index, episode_id, schedule,
            n_adv_in=n_adv_in, n_in=len(senders),
        )
    return outputs
