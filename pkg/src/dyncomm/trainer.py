"""Episode rollout, REINFORCE training, and evaluation.

An episode solves one query over T rounds: independent answers at round 1,
then per round feature construction, credit updates, participation
sampling, constrained DAG construction, and topological execution; the
decision round applies one more credit update, selects the decision set,
and takes a credit-weighted vote.

Training ascends expected utility with the REINFORCE estimator. The
surrogate for one episode is

    S = (sum_{t=2..T} gamma^(T+1-t) * logP_t + logP_{T+1}) * (u - b)

with a running-mean reward baseline ``b`` (exactly the undiscounted
estimator when the baseline is disabled). Features and executed actions are
frozen from the rollout, so the surrogate's only differentiable path is
through the credits; its analytic gradient is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .agents import (
    AdversarySchedule,
    HttpChatBackend,
    HttpConfig,
    SyntheticAgentBackend,
    SyntheticBehavior,
    render_agent_prompt,
    schedule_adversaries,
    schedule_stream,
)
from .core import (
    AgentSpec,
    ConfigurationError,
    DyncommError,
    EpisodeFailure,
    Query,
    Trajectory,
    TransportError,
    compute_utility,
)
from .creditnet import (
    CreditNetDims,
    CreditNetParams,
    CreditState,
    TENSOR_ORDER,
    backward,
    forward_round,
    init_params,
    save_checkpoint,
)
from .decision import aggregate_vote, decision_weights
from .embedding import EmbeddingConfig, ExternalEmbedder, SyntheticEmbedder
from .features import FeatureLayout, build_all_features
from .metrics import EpisodeMetrics, accuracy, mean_adacc
from .policy import EpsilonSchedule, bernoulli_logp, infer_participation, sample_participation
from .seeding import TAG_PARTICIPATION, TAG_PRESET_GRAPH, TAG_QUERY_SAMPLER, rng_stream
from .topology import EdgeConstraints, baseline_graph, build_comm_graph, execute_round

logger = logging.getLogger(__name__)

ROLE_NAMES = (
    "Analyst", "Mathematician", "Scientist", "Historian", "Engineer",
    "Physician", "Economist", "Linguist", "Geographer", "Chemist",
)

# Offset separating eval episode ids from training episode ids, so paired
# comparison runs (learned vs preset) consume identical RNG streams.
EVAL_EPISODE_BASE = 1_000_000_000

ABLATIONS = ("none", "no_ranking", "no_removal")


@dataclass(frozen=True)
class TrainConfig:
    n_agents: int = 6
    rounds: int = 4
    batch_size: int = 32
    learning_rate: float = 5e-4
    gamma: float = 0.9
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    attack_count: int = 0
    transition_rounds: tuple[int, ...] = (3, 4)
    budget_in: int | None = None
    budget_out: int | None = None
    edge_mask: tuple[tuple[int, ...], ...] | None = None
    seed: int = 0
    max_iterations: int = 200
    baseline_enabled: bool = True
    baseline_momentum: float = 0.95
    grad_clip: float = 5.0
    k_max: int = 10
    d_emb: int = 384
    hidden: int = 64
    mlp_hidden: int = 64
    backend: str = "synthetic"
    behavior: SyntheticBehavior = field(default_factory=SyntheticBehavior)
    http: HttpConfig = field(default_factory=HttpConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    ablation: str = "none"
    decision_softmax_over_selected: bool = False
    decision_llm: bool = False
    eval_episodes: int = 96
    eval_interval: int = 10
    checkpoint_interval: int = 50
    workers: int = 1
    write_trace: bool = True
    target_adacc: float | None = None
    target_min_iterations: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 2:
            raise ConfigurationError("rounds must be >= 2")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if not 0 <= self.attack_count <= self.n_agents:
            raise ConfigurationError("attack_count must lie in [0, n_agents]")
        for r in self.transition_rounds:
            if not 2 <= r <= self.rounds:
                raise ConfigurationError(
                    f"transition round {r} outside [2, rounds={self.rounds}]"
                )
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.backend not in ("synthetic", "http"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(k_max=self.k_max, d_emb=self.d_emb)

    @property
    def dims(self) -> CreditNetDims:
        return CreditNetDims(
            feature_len=self.layout.length, hidden=self.hidden, mlp_hidden=self.mlp_hidden
        )

    @property
    def constraints(self) -> EdgeConstraints:
        mask = None if self.edge_mask is None else np.asarray(self.edge_mask)
        return EdgeConstraints(mask=mask, b_out=self.budget_out, b_in=self.budget_in)

    def to_dict(self) -> dict:
        def convert(value):
            if is_dataclass(value) and not isinstance(value, type):
                return {f.name: convert(getattr(value, f.name)) for f in fields(value)}
            if isinstance(value, tuple):
                return [convert(v) for v in value]
            return value

        return convert(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**_coerce_dataclass_kwargs(cls, data))


def _coerce_dataclass_kwargs(dc_type, data: dict) -> dict:
    known = {f.name: f for f in fields(dc_type)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown configuration key(s) for {dc_type.__name__}: {unknown}")
    kwargs = {}
    nested = {
        "epsilon": EpsilonSchedule,
        "behavior": SyntheticBehavior,
        "http": HttpConfig,
        "embedding": EmbeddingConfig,
    }
    for name, value in data.items():
        if name in nested and isinstance(value, dict):
            kwargs[name] = nested[name](**_coerce_dataclass_kwargs(nested[name], value))
        elif name in ("transition_rounds",) and value is not None:
            kwargs[name] = tuple(int(v) for v in value)
        elif name == "edge_mask" and value is not None:
            kwargs[name] = tuple(tuple(int(v) for v in row) for row in value)
        else:
            kwargs[name] = value
    return kwargs


def make_agents(cfg: TrainConfig) -> list[AgentSpec]:
    specs = []
    for i in range(cfg.n_agents):
        role = ROLE_NAMES[i % len(ROLE_NAMES)]
        if i >= len(ROLE_NAMES):
            role = f"{role} {i // len(ROLE_NAMES) + 1}"
        specs.append(AgentSpec(index=i, role=role, backend=cfg.backend))
    return specs


def make_embedder(cfg: TrainConfig):
    if cfg.embedding.provider == "external":
        return ExternalEmbedder(replace_dimension(cfg.embedding, cfg.d_emb))
    return SyntheticEmbedder(d_emb=cfg.d_emb, seed=cfg.seed)


def replace_dimension(config: EmbeddingConfig, d_emb: int) -> EmbeddingConfig:
    from dataclasses import replace

    return config if config.d_emb == d_emb else replace(config, d_emb=d_emb)


def make_backend(cfg: TrainConfig, embedder=None):
    embedder = embedder or make_embedder(cfg)
    if cfg.backend == "synthetic":
        return SyntheticAgentBackend(cfg.behavior, embedder, cfg.seed)
    return HttpChatBackend(cfg.http, embedder, cfg.seed)


@dataclass(eq=False)
class EpisodeRecord:
    episode_id: int
    query_id: str
    trajectory: Trajectory | None
    credits: list[np.ndarray]
    features: list[np.ndarray]
    state: CreditState | None
    tokens_per_agent_round: float
    n_messages: int
    predicted_reliable: np.ndarray
    true_adversarial: np.ndarray
    epsilon: float = 0.0
    failed: bool = False

    @property
    def reward(self) -> float:
        return self.trajectory.reward if self.trajectory else 0.0

    def to_metrics(self) -> EpisodeMetrics:
        return EpisodeMetrics(
            correct=bool(self.trajectory and self.trajectory.reward == 1.0),
            tokens_per_agent_round=self.tokens_per_agent_round,
            predicted_reliable=self.predicted_reliable,
            true_adversarial=self.true_adversarial,
        )


def run_episode(
    query: Query,
    params: CreditNetParams,
    cfg: TrainConfig,
    schedule: AdversarySchedule,
    mode: str,
    episode_id: int,
    backend,
    epsilon: float = 0.0,
    keep_tape: bool | None = None,
) -> EpisodeRecord:
    """Roll out one full episode; pure given its arguments."""
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if keep_tape is None:
        keep_tape = mode == "train"
    n, t_max = cfg.n_agents, cfg.rounds
    specs = make_agents(cfg)
    layout = cfg.layout
    state = CreditState(n, t_max, cfg.dims)

    prompt1 = render_agent_prompt(query, [])
    outputs = [
        backend.respond(specs[i], query, prompt1, 1, episode_id, schedule, 0, 0)
        for i in range(n)
    ]
    initial = list(outputs)
    tokens_total = sum(o.prompt_token_count for o in outputs)

    credits_prev = np.full(n, 0.5)
    graph_prev = None
    actions: list[np.ndarray] = []
    logps: list[float] = []
    credits_by_round: list[np.ndarray] = []
    features_by_round: list[np.ndarray] = []
    graphs = []
    n_messages = 0
    final_answer = 0
    weights = np.full(n, 1.0 / n)

    for t in range(2, t_max + 2):
        feats = build_all_features(t, outputs, graph_prev, credits_prev, initial, layout)
        credits = forward_round(state, feats, params)
        credits_by_round.append(credits)
        if keep_tape:
            features_by_round.append(feats)

        decision_round = t == t_max + 1
        if cfg.ablation == "no_removal":
            a = np.ones(n, dtype=np.int8)
            logp = bernoulli_logp(credits, a)
        elif mode == "train":
            action = sample_participation(
                credits, epsilon, rng_stream(cfg.seed, TAG_PARTICIPATION, episode_id, t)
            )
            a, logp = action.a, action.logp
            if decision_round and not a.any():
                # The decision set may never be empty; promote the top credit
                # and account for the executed action's probability.
                a = a.copy()
                a[int(np.argmax(credits))] = 1
                logp = bernoulli_logp(credits, a)
        else:
            a = infer_participation(credits)
            logp = bernoulli_logp(credits, a)
        actions.append(a)
        logps.append(logp)

        if decision_round:
            weights = decision_weights(credits, a, cfg.decision_softmax_over_selected)
            if cfg.decision_llm:
                final_answer, decision_tokens = _llm_decision(
                    query, outputs, credits, a, specs, cfg, backend, episode_id, schedule
                )
                tokens_total += decision_tokens
            else:
                final_answer = aggregate_vote([o.sol for o in outputs], weights)
        else:
            graph = build_comm_graph(
                credits, a, cfg.constraints, ranked=cfg.ablation != "no_ranking"
            )
            outputs = execute_round(
                graph, query, outputs, specs, backend, t, episode_id, schedule
            )
            tokens_total += sum(outputs[node].prompt_token_count for node in graph.nodes)
            n_messages += graph.n_edges
            graphs.append(graph)
            # Environment transition: a scheduled adversary's standing output
            # turns at its transition round whether or not it was queried.
            # Backends without synthesized stances return None (carry-forward).
            turned = getattr(backend, "turned_stance", None)
            if turned is not None:
                in_graph = set(graph.nodes)
                for i in range(n):
                    if i not in in_graph and schedule.is_adversarial(i, t):
                        stance = turned(specs[i], query, t, episode_id, schedule)
                        if stance is not None:
                            outputs[i] = stance
            graph_prev = graph
            credits_prev = credits

    reward = compute_utility(final_answer, query.gold, query.n_options)
    trajectory = Trajectory(
        actions=actions,
        logps=logps,
        comm_graphs=graphs,
        decision_weights=weights,
        final_answer=final_answer,
        reward=reward,
    )
    return EpisodeRecord(
        episode_id=episode_id,
        query_id=query.id,
        trajectory=trajectory,
        credits=credits_by_round,
        features=features_by_round,
        state=state if keep_tape else None,
        tokens_per_agent_round=tokens_total / (n * t_max),
        n_messages=n_messages,
        predicted_reliable=actions[-1].astype(np.int8),
        true_adversarial=schedule.true_adversarial_vector(),
        epsilon=epsilon,
    )


def run_preset_episode(
    query: Query,
    cfg: TrainConfig,
    schedule: AdversarySchedule,
    episode_id: int,
    backend,
    kind: str,
    p_edge: float = 0.5,
) -> EpisodeRecord:
    """Episode over a static topology preset with uniform majority voting."""
    n, t_max = cfg.n_agents, cfg.rounds
    specs = make_agents(cfg)
    prompt1 = render_agent_prompt(query, [])
    outputs = [
        backend.respond(specs[i], query, prompt1, 1, episode_id, schedule, 0, 0)
        for i in range(n)
    ]
    tokens_total = sum(o.prompt_token_count for o in outputs)
    n_messages = 0
    graphs = []
    for t in range(2, t_max + 1):
        rng = rng_stream(cfg.seed, TAG_PRESET_GRAPH, episode_id, t)
        graph = baseline_graph(kind, n, p_edge=p_edge, rng=rng)
        outputs = execute_round(graph, query, outputs, specs, backend, t, episode_id, schedule)
        tokens_total += sum(outputs[node].prompt_token_count for node in graph.nodes)
        n_messages += graph.n_edges
        graphs.append(graph)

    weights = np.full(n, 1.0 / n)
    final_answer = aggregate_vote([o.sol for o in outputs], weights)
    reward = compute_utility(final_answer, query.gold, query.n_options)
    ones = np.ones(n, dtype=np.int8)
    trajectory = Trajectory(
        actions=[ones.copy() for _ in range(t_max)],
        logps=[0.0] * t_max,
        comm_graphs=graphs,
        decision_weights=weights,
        final_answer=final_answer,
        reward=reward,
    )
    return EpisodeRecord(
        episode_id=episode_id,
        query_id=query.id,
        trajectory=trajectory,
        credits=[],
        features=[],
        state=None,
        tokens_per_agent_round=tokens_total / (n * t_max),
        n_messages=n_messages,
        predicted_reliable=ones,
        true_adversarial=schedule.true_adversarial_vector(),
    )


def _llm_decision(query, outputs, credits, a, specs, cfg, backend, episode_id, schedule):
    """Replace the weighted vote with a decision-node agent.

    The decision node is prompted with the selected agents' messages in
    descending credit order and answers like any other agent; its option
    index becomes the final answer.
    """
    from .agents import render_peer_message

    selected = [i for i in range(len(a)) if a[i] == 1]
    order = sorted(selected, key=lambda i: (-credits[i], i))
    messages = [render_peer_message(outputs[i], specs[i].role) for i in order]
    prompt = render_agent_prompt(query, messages)
    decision_spec = AgentSpec(index=cfg.n_agents, role="Decision Maker", backend=cfg.backend)
    padded = AdversarySchedule(
        transition_rounds=schedule.transition_rounds + (None,),
        candidate_rounds=schedule.candidate_rounds,
    )
    round_index = cfg.rounds + 1
    n_adv = sum(1 for i in order if schedule.is_adversarial(i, round_index))
    out = backend.respond(
        decision_spec, query, prompt, round_index, episode_id, padded,
        n_adv_in=n_adv, n_in=len(order),
    )
    return out.option, out.prompt_token_count


def _round_weights(t_max: int, gamma: float) -> np.ndarray:
    """Discount per trajectory entry: gamma^(T+1-t) for t=2..T, then 1."""
    weights = [gamma ** (t_max + 1 - t) for t in range(2, t_max + 1)]
    weights.append(1.0)
    return np.array(weights)


def _surrogate_upstream(record: EpisodeRecord, advantage: float, gamma: float, t_max: int):
    coeffs = _round_weights(t_max, gamma)
    upstream = []
    for coeff, a, c in zip(coeffs, record.trajectory.actions, record.credits):
        dlogp = np.where(a == 1, 1.0 / c, -1.0 / (1.0 - c))
        upstream.append(coeff * advantage * dlogp)
    return upstream


def _axpy(dst: CreditNetParams, src: CreditNetParams, scale: float) -> None:
    for name in TENSOR_ORDER:
        getattr(dst, name).__iadd__(scale * getattr(src, name))


def reinforce_grad(
    records: list[EpisodeRecord],
    params: CreditNetParams,
    gamma: float,
    baseline: float,
    t_max: int,
) -> CreditNetParams:
    """Ascent gradient of the mean surrogate over the batch.

    Failed episodes are excluded; the gradient flows only through the
    executed-action log-probabilities via the credits.
    """
    usable = [r for r in records if not r.failed]
    if not usable:
        raise DyncommError("no usable episodes in batch")
    grads = params.zeros_like()
    for record in usable:
        if len(record.trajectory.logps) != t_max:
            raise ConfigurationError("trajectory length does not match configured rounds")
        advantage = record.trajectory.reward - baseline
        upstream = _surrogate_upstream(record, advantage, gamma, t_max)
        _axpy(grads, backward(record.state, upstream, params), 1.0 / len(usable))
    return grads


def surrogate_loss(
    records: list[EpisodeRecord],
    params: CreditNetParams,
    gamma: float,
    baseline: float,
    t_max: int,
) -> tuple[float, CreditNetParams]:
    """Replay the frozen rollouts under ``params`` and return (S, dS/dtheta).

    Used by the finite-difference gradient oracle: the loss value is computed
    by a fresh forward pass over the recorded features and actions, so
    central differences are independent of the backward implementation.
    """
    usable = [r for r in records if not r.failed]
    total = 0.0
    grads = params.zeros_like()
    coeffs = None
    for record in usable:
        n = len(record.predicted_reliable)
        state = CreditState(n, t_max, params.dims)
        advantage = record.trajectory.reward - baseline
        if coeffs is None:
            coeffs = _round_weights(t_max, gamma)
        upstream = []
        surrogate = 0.0
        for coeff, feats, a in zip(coeffs, record.features, record.trajectory.actions):
            credits = forward_round(state, feats, params)
            surrogate += coeff * bernoulli_logp(credits, a)
            dlogp = np.where(a == 1, 1.0 / credits, -1.0 / (1.0 - credits))
            upstream.append(coeff * advantage * dlogp)
        total += surrogate * advantage / len(usable)
        _axpy(grads, backward(state, upstream, params), 1.0 / len(usable))
    return total, grads


class Adam:
    """Plain Adam ascent on the flat parameter vector."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return flat + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grads: CreditNetParams, max_norm: float) -> np.ndarray:
    flat = grads.flatten()
    norm = float(np.linalg.norm(flat))
    if max_norm > 0 and norm > max_norm:
        flat = flat * (max_norm / norm)
    return flat


@dataclass(eq=False)
class EvalSummary:
    episodes: int
    accuracy: float
    adacc: float
    mean_tokens: float
    mean_messages_per_round: float
    failed: int = 0

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "accuracy": self.accuracy,
            "adacc": self.adacc,
            "mean_tokens": self.mean_tokens,
            "mean_messages_per_round": self.mean_messages_per_round,
            "failed": self.failed,
        }


def _episode_schedule(cfg: TrainConfig, episode_id: int) -> AdversarySchedule:
    return schedule_adversaries(
        cfg.n_agents,
        cfg.attack_count,
        set(cfg.transition_rounds),
        schedule_stream(cfg.seed, episode_id),
    )


def _summarize(records: list[EpisodeRecord], cfg: TrainConfig) -> EvalSummary:
    usable = [r for r in records if not r.failed]
    metrics = [r.to_metrics() for r in usable]
    comm_rounds = max(cfg.rounds - 1, 1)
    return EvalSummary(
        episodes=len(usable),
        accuracy=accuracy(metrics),
        adacc=mean_adacc(metrics),
        mean_tokens=float(np.mean([r.tokens_per_agent_round for r in usable])),
        mean_messages_per_round=float(np.mean([r.n_messages / comm_rounds for r in usable])),
        failed=len(records) - len(usable),
    )


def _map_episodes(fn, jobs: list, workers: int) -> list[EpisodeRecord]:
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # executor.map preserves submission order: deterministic reduction.
        return list(pool.map(fn, jobs))


def evaluate(
    params: CreditNetParams,
    cfg: TrainConfig,
    queries: list[Query],
    n_episodes: int,
    backend,
    trace=None,
    preset: str | None = None,
    p_edge: float = 0.5,
) -> tuple[EvalSummary, list[EpisodeRecord]]:
    """Deterministic-inference evaluation; ``preset`` switches to a static
    topology baseline run over the same episode ids and schedules."""

    def one(j: int) -> EpisodeRecord:
        episode_id = EVAL_EPISODE_BASE + j
        query = queries[j % len(queries)]
        schedule = _episode_schedule(cfg, episode_id)
        try:
            if preset is None:
                return run_episode(
                    query, params, cfg, schedule, "infer", episode_id, backend, epsilon=0.0
                )
            return run_preset_episode(
                query, cfg, schedule, episode_id, backend, kind=preset, p_edge=p_edge
            )
        except (TransportError, EpisodeFailure) as exc:
            logger.warning("eval episode %d failed: %s", episode_id, exc)
            n = cfg.n_agents
            return EpisodeRecord(
                episode_id=episode_id, query_id=query.id, trajectory=None, credits=[],
                features=[], state=None, tokens_per_agent_round=0.0, n_messages=0,
                predicted_reliable=np.ones(n, dtype=np.int8),
                true_adversarial=schedule.true_adversarial_vector(), failed=True,
            )

    records = _map_episodes(one, list(range(n_episodes)), cfg.workers)
    if trace is not None:
        phase = "eval" if preset is None else f"preset:{preset}"
        for record in records:
            trace.write_record(phase, None, record)
    return _summarize(records, cfg), records


class TraceWriter:
    """Append-only JSON-lines episode trace with deterministic serialization."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def write_record(self, phase: str, iteration: int | None, record: EpisodeRecord) -> None:
        payload = {
            "phase": phase,
            "iteration": iteration,
            "episode": record.episode_id,
            "query_id": record.query_id,
            "failed": record.failed,
            "epsilon": record.epsilon,
            "predicted_reliable": record.predicted_reliable.tolist(),
            "true_adversarial": record.true_adversarial.tolist(),
            "tokens_per_agent_round": record.tokens_per_agent_round,
        }
        if record.trajectory is not None:
            traj = record.trajectory
            rounds = []
            for idx, graph in enumerate(traj.comm_graphs):
                entry = {
                    "t": idx + 2,
                    "action": traj.actions[idx].tolist(),
                    "logp": traj.logps[idx],
                    "nodes": list(graph.nodes),
                    "edges": [list(e) for e in graph.edges],
                }
                if record.credits:
                    entry["credits"] = record.credits[idx].tolist()
                rounds.append(entry)
            payload["rounds"] = rounds
            payload["decision"] = {
                "action": traj.actions[-1].tolist(),
                "logp": traj.logps[-1],
                "weights": traj.decision_weights.tolist(),
            }
            if record.credits:
                payload["decision"]["credits"] = record.credits[-1].tolist()
            payload["final_answer"] = traj.final_answer
            payload["reward"] = traj.reward
        self._fh.write(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")

    def close(self) -> None:
        self._fh.close()


@dataclass(eq=False)
class TrainResult:
    params: CreditNetParams
    history: list[dict]
    final_eval: EvalSummary | None
    iterations_run: int
    out_dir: Path | None


METRIC_COLUMNS = (
    "iteration", "train_acc", "eval_acc", "adacc", "mean_tokens", "epsilon", "mean_reward"
)


def train_loop(
    cfg: TrainConfig,
    dataset: list[Query],
    eval_queries: list[Query] | None = None,
    out_dir: str | Path | None = None,
    backend=None,
    log_every: int = 0,
) -> TrainResult:
    """Full REINFORCE training run with metrics, traces, and checkpoints."""
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    eval_queries = eval_queries or dataset
    backend = backend or make_backend(cfg)
    params = init_params(cfg.seed, cfg.dims)
    adam = Adam(cfg.learning_rate)
    running_baseline: float | None = None
    best_eval_acc = -1.0

    out_path: Path | None = None
    trace = None
    csv_fh = None
    writer = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        if cfg.write_trace:
            trace = TraceWriter(out_path / "trace.jsonl")
        csv_fh = open(out_path / "metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(csv_fh)
        writer.writerow(METRIC_COLUMNS)

    history: list[dict] = []
    eval_acc = float("nan")
    eval_adacc = float("nan")
    final_eval: EvalSummary | None = None
    iterations_run = 0

    try:
        for iteration in range(cfg.max_iterations):
            epsilon = cfg.epsilon.value(iteration)
            qrng = rng_stream(cfg.seed, TAG_QUERY_SAMPLER, iteration)
            batch_queries = [
                dataset[int(j)] for j in qrng.integers(len(dataset), size=cfg.batch_size)
            ]

            def rollout(job):
                j, query = job
                episode_id = iteration * cfg.batch_size + j
                schedule = _episode_schedule(cfg, episode_id)
                try:
                    return run_episode(
                        query, params, cfg, schedule, "train", episode_id, backend,
                        epsilon=epsilon,
                    )
                except (TransportError, EpisodeFailure) as exc:
                    logger.warning("train episode %d failed: %s", episode_id, exc)
                    return EpisodeRecord(
                        episode_id=episode_id, query_id=query.id, trajectory=None,
                        credits=[], features=[], state=None, tokens_per_agent_round=0.0,
                        n_messages=0,
                        predicted_reliable=np.ones(cfg.n_agents, dtype=np.int8),
                        true_adversarial=schedule.true_adversarial_vector(),
                        epsilon=epsilon, failed=True,
                    )

            records = _map_episodes(rollout, list(enumerate(batch_queries)), cfg.workers)
            usable = [r for r in records if not r.failed]
            if not usable:
                raise DyncommError(f"iteration {iteration}: every episode failed")
            batch_mean = float(np.mean([r.reward for r in usable]))
            baseline_used = 0.0
            if cfg.baseline_enabled:
                baseline_used = batch_mean if running_baseline is None else running_baseline

            grads = reinforce_grad(records, params, cfg.gamma, baseline_used, cfg.rounds)
            flat_grad = clip_grad_norm(grads, cfg.grad_clip)
            if not np.all(np.isfinite(flat_grad)):
                if out_path is not None:
                    _dump_diagnostics(out_path, iteration, params, flat_grad)
                raise DyncommError(f"iteration {iteration}: non-finite gradient; aborting")
            params = CreditNetParams.from_flat(adam.step(params.flatten(), flat_grad), cfg.dims)

            if cfg.baseline_enabled:
                running_baseline = (
                    batch_mean
                    if running_baseline is None
                    else cfg.baseline_momentum * running_baseline
                    + (1.0 - cfg.baseline_momentum) * batch_mean
                )

            if trace is not None:
                for record in records:
                    trace.write_record("train", iteration, record)

            iterations_run = iteration + 1
            is_last = iteration == cfg.max_iterations - 1
            if cfg.eval_interval > 0 and (iteration % cfg.eval_interval == 0 or is_last):
                final_eval, _ = evaluate(
                    params, cfg, eval_queries, cfg.eval_episodes, backend, trace=trace
                )
                eval_acc = final_eval.accuracy
                eval_adacc = final_eval.adacc
                if out_path is not None and eval_acc > best_eval_acc:
                    best_eval_acc = eval_acc
                    save_checkpoint(params, out_path / "ckpt_best.bin", cfg.seed, cfg.layout.tag)

            row = {
                "iteration": iteration,
                "train_acc": accuracy([r.to_metrics() for r in usable]),
                "eval_acc": eval_acc,
                "adacc": eval_adacc,
                "mean_tokens": float(np.mean([r.tokens_per_agent_round for r in usable])),
                "epsilon": epsilon,
                "mean_reward": batch_mean,
            }
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in METRIC_COLUMNS])
            if log_every and iteration % log_every == 0:
                logger.info(
                    "iter %d: train_acc=%.3f eval_acc=%.3f adacc=%.3f eps=%.3f",
                    iteration, row["train_acc"], eval_acc, eval_adacc, epsilon,
                )

            if out_path is not None and cfg.checkpoint_interval > 0 and (
                (iteration + 1) % cfg.checkpoint_interval == 0
            ):
                save_checkpoint(
                    params, out_path / f"ckpt_iter{iteration + 1}.bin", cfg.seed, cfg.layout.tag
                )

            if (
                cfg.target_adacc is not None
                and iterations_run >= cfg.target_min_iterations
                and np.isfinite(eval_adacc)
                and eval_adacc >= cfg.target_adacc
            ):
                logger.info("stopping early at iteration %d: adacc target reached", iteration)
                break
    finally:
        if trace is not None:
            trace.close()
        if csv_fh is not None:
            csv_fh.close()

    if out_path is not None:
        save_checkpoint(params, out_path / "ckpt_final.bin", cfg.seed, cfg.layout.tag)
        summary = {
            "iterations_run": iterations_run,
            "final_eval": final_eval.to_dict() if final_eval else None,
        }
        (out_path / "summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return TrainResult(
        params=params,
        history=history,
        final_eval=final_eval,
        iterations_run=iterations_run,
        out_dir=out_path,
    )


def _dump_diagnostics(out_path: Path, iteration: int, params: CreditNetParams,
                      flat_grad: np.ndarray) -> None:
    path = out_path / f"diagnostic_iter{iteration}.json"
    payload = {
        "iteration": iteration,
        "grad_finite": bool(np.all(np.isfinite(flat_grad))),
        "grad_norm": float(np.linalg.norm(flat_grad[np.isfinite(flat_grad)])),
        "param_norm": float(np.linalg.norm(params.flatten())),
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.error("non-finite gradient diagnostics written to %s", path)
