"""Behavior-driven dynamic communication topologies for multi-agent QA.

A library and CLI that learns per-round communication DAGs for a pool of
question-answering agents from their observed behavior, with a recurrent
credit network, participation policy, constrained graph construction,
credit-weighted decision voting, and REINFORCE training — runnable fully
offline against a calibrated synthetic agent pool, or against any
chat-completion-style HTTP backend.
"""

from .agents import (
    AdversarySchedule,
    SyntheticAgentBackend,
    SyntheticBehavior,
    apply_influence,
    render_agent_prompt,
    render_peer_message,
    schedule_adversaries,
)
from .core import (
    AgentOutput,
    AgentSpec,
    DyncommError,
    Query,
    Trajectory,
    canonicalize_answer,
    compute_utility,
)
from .creditnet import (
    CreditNetDims,
    CreditNetParams,
    CreditState,
    backward,
    credit_head,
    forward_round,
    grad_check,
    gru_step,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .decision import aggregate_vote, decision_weights
from .datasets import load_dataset, synthetic_queries
from .embedding import EmbeddingConfig, SyntheticEmbedder, cosine, get_embedder
from .features import FeatureLayout, build_all_features, build_node_features
from .metrics import EpisodeMetrics, accuracy, adacc, token_count
from .policy import EpsilonSchedule, infer_participation, sample_participation
from .topology import CommGraph, EdgeConstraints, baseline_graph, build_comm_graph, execute_round
from .trainer import TrainConfig, evaluate, run_episode, train_loop

__version__ = "0.1.0"

__all__ = [
    "AdversarySchedule", "AgentOutput", "AgentSpec", "CommGraph", "CreditNetDims",
    "CreditNetParams", "CreditState", "DyncommError", "EdgeConstraints",
    "EmbeddingConfig", "EpisodeMetrics", "EpsilonSchedule", "FeatureLayout", "Query",
    "SyntheticAgentBackend", "SyntheticBehavior", "SyntheticEmbedder", "TrainConfig",
    "Trajectory", "accuracy", "adacc", "aggregate_vote", "apply_influence", "backward",
    "baseline_graph", "build_all_features", "build_comm_graph", "build_node_features",
    "canonicalize_answer", "compute_utility", "cosine", "credit_head", "decision_weights",
    "evaluate", "execute_round", "forward_round", "get_embedder", "grad_check", "gru_step",
    "infer_participation", "init_params", "load_checkpoint", "load_dataset",
    "render_agent_prompt", "render_peer_message", "run_episode", "sample_participation",
    "save_checkpoint", "schedule_adversaries", "synthetic_queries", "token_count",
    "train_loop",
]
