"""Command-line interface: run orchestration, configuration, dataset I/O.

Commands:
  train       full REINFORCE training loop
  eval        deterministic inference from a frozen checkpoint
  simulate    static topology presets (random/complete) for comparison runs
  graph-dump  per-round edge lists for one episode
  grad-check  finite-difference oracle for the analytic gradients

Every run writes a resolved-config snapshot (config.json) beside its
outputs; rerunning with ``--config <snapshot>`` reproduces it exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ConfigurationError, DyncommError, Query
from .creditnet import grad_check, init_params, load_checkpoint
from .datasets import load_dataset, synthetic_queries
from .policy import EpsilonSchedule
from .trainer import (
    TrainConfig,
    evaluate,
    make_backend,
    run_episode,
    surrogate_loss,
    train_loop,
)
from .seeding import TAG_GRADCHECK, rng_stream

logger = logging.getLogger(__name__)

CONFIG_TOP_KEYS = {"command", "dataset", "eval_dataset", "out", "train"}


def _load_config_file(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must contain a JSON object")
    unknown = sorted(set(data) - CONFIG_TOP_KEYS)
    if unknown:
        raise ConfigurationError(
            f"unknown top-level configuration key(s): {unknown}; expected {sorted(CONFIG_TOP_KEYS)}"
        )
    return data


# (flag attribute, TrainConfig field) pairs applied as overrides.
_FLAG_TO_FIELD = (
    ("seed", "seed"),
    ("agents", "n_agents"),
    ("rounds", "rounds"),
    ("attack_count", "attack_count"),
    ("budget_in", "budget_in"),
    ("budget_out", "budget_out"),
    ("backend", "backend"),
    ("workers", "workers"),
    ("iterations", "max_iterations"),
    ("batch_size", "batch_size"),
    ("ablation", "ablation"),
    ("eval_episodes", "eval_episodes"),
    ("eval_interval", "eval_interval"),
)


def parse_config(args: argparse.Namespace) -> tuple[TrainConfig, str | None, str | None, str | None]:
    """Merge config file and flag overrides into a resolved configuration.

    Returns (train_config, dataset, eval_dataset, out_dir); flags win over
    file values, and unknown keys are rejected with the offending name.
    """
    file_data = _load_config_file(args.config) if getattr(args, "config", None) else {}
    train_data = dict(file_data.get("train", {}))

    for flag, fieldname in _FLAG_TO_FIELD:
        value = getattr(args, flag, None)
        if value is not None:
            train_data[fieldname] = value
    if getattr(args, "transition_rounds", None):
        train_data["transition_rounds"] = [int(r) for r in args.transition_rounds.split(",")]
    if getattr(args, "no_trace", False):
        train_data["write_trace"] = False
    if getattr(args, "epsilon_start", None) is not None or getattr(args, "epsilon_end", None) is not None:
        eps = dict(train_data.get("epsilon", {}))
        if getattr(args, "epsilon_start", None) is not None:
            eps["start"] = args.epsilon_start
        if getattr(args, "epsilon_end", None) is not None:
            eps["end"] = args.epsilon_end
        train_data["epsilon"] = eps

    cfg = TrainConfig.from_dict(train_data)
    dataset = getattr(args, "dataset", None) or file_data.get("dataset")
    eval_dataset = getattr(args, "eval_dataset", None) or file_data.get("eval_dataset")
    out_dir = getattr(args, "out", None) or file_data.get("out")
    return cfg, dataset, eval_dataset, out_dir


def write_snapshot(out_dir: Path, command: str, cfg: TrainConfig,
                   dataset: str | None, eval_dataset: str | None) -> None:
    snapshot = {
        "command": command,
        "dataset": dataset,
        "eval_dataset": eval_dataset,
        "out": str(out_dir),
        "train": cfg.to_dict(),
    }
    (out_dir / "config.json").write_text(
        json.dumps(snapshot, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _require(value, name: str):
    if value is None:
        raise ConfigurationError(f"missing required field: {name}")
    return value


def _resolve_dataset(path: str | None, name: str) -> list[Query]:
    return load_dataset(_require(path, name))


def _prepare_out(out_dir: str | None) -> Path:
    path = Path(_require(out_dir, "out"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args: argparse.Namespace) -> int:
    cfg, dataset_path, eval_path, out_dir = parse_config(args)
    dataset = _resolve_dataset(dataset_path, "dataset")
    eval_queries = load_dataset(eval_path) if eval_path else dataset
    out = _prepare_out(out_dir)
    write_snapshot(out, "train", cfg, dataset_path, eval_path)
    result = train_loop(cfg, dataset, eval_queries, out_dir=out, log_every=args.log_every)
    if result.final_eval is not None:
        print(json.dumps(result.final_eval.to_dict(), sort_keys=True))
    print(f"run complete: {result.iterations_run} iterations, outputs in {out}")
    return 0


def _load_params_for(cfg: TrainConfig, checkpoint: str):
    params, header = load_checkpoint(checkpoint)
    if header["feature_layout"] != cfg.layout.tag:
        raise ConfigurationError(
            f"checkpoint feature layout {header['feature_layout']!r} does not match "
            f"configured layout {cfg.layout.tag!r}; refusing stale checkpoint"
        )
    if params.dims != cfg.dims:
        raise ConfigurationError("checkpoint dimensions do not match configuration")
    return params


def cmd_eval(args: argparse.Namespace) -> int:
    cfg, dataset_path, eval_path, out_dir = parse_config(args)
    queries = _resolve_dataset(eval_path or dataset_path, "dataset")
    params = _load_params_for(cfg, _require(args.checkpoint, "checkpoint"))
    out = _prepare_out(out_dir)
    write_snapshot(out, "eval", cfg, dataset_path, eval_path)
    backend = make_backend(cfg)
    n_episodes = args.episodes or cfg.eval_episodes
    from .trainer import TraceWriter

    trace = TraceWriter(out / "trace.jsonl") if cfg.write_trace else None
    try:
        summary, _ = evaluate(params, cfg, queries, n_episodes, backend, trace=trace)
    finally:
        if trace is not None:
            trace.close()
    (out / "eval_metrics.json").write_text(
        json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg, dataset_path, eval_path, out_dir = parse_config(args)
    queries = _resolve_dataset(eval_path or dataset_path, "dataset")
    out = _prepare_out(out_dir)
    write_snapshot(out, "simulate", cfg, dataset_path, eval_path)
    backend = make_backend(cfg)
    n_episodes = args.episodes or cfg.eval_episodes
    from .trainer import TraceWriter

    trace = TraceWriter(out / "trace.jsonl") if cfg.write_trace else None
    try:
        summary, _ = evaluate(
            None, cfg, queries, n_episodes, backend,
            trace=trace, preset=args.preset, p_edge=args.p_edge,
        )
    finally:
        if trace is not None:
            trace.close()
    (out / "simulate_metrics.json").write_text(
        json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return 0


def cmd_graph_dump(args: argparse.Namespace) -> int:
    cfg, dataset_path, eval_path, out_dir = parse_config(args)
    queries = _resolve_dataset(dataset_path or eval_path, "dataset")
    if args.checkpoint:
        params = _load_params_for(cfg, args.checkpoint)
    else:
        params = init_params(cfg.seed, cfg.dims)
    query = queries[args.query_index % len(queries)]
    from .trainer import _episode_schedule

    schedule = _episode_schedule(cfg, args.episode)
    backend = make_backend(cfg)
    record = run_episode(query, params, cfg, schedule, "infer", args.episode, backend)
    lines = [f"episode {args.episode} query {query.id}"]
    for idx, graph in enumerate(record.trajectory.comm_graphs):
        t = idx + 2
        credits = " ".join(f"{c:.4f}" for c in record.credits[idx])
        lines.append(f"round {t} nodes {' '.join(str(n) for n in graph.nodes)}")
        lines.append(f"round {t} credits {credits}")
        for i, j in graph.edges:
            lines.append(f"round {t} edge {i} -> {j}")
    selected = [i for i, a in enumerate(record.trajectory.actions[-1]) if a == 1]
    lines.append(f"decision selected {' '.join(str(i) for i in selected)}")
    lines.append(f"decision answer {record.trajectory.final_answer} reward {record.trajectory.reward}")
    text = "\n".join(lines) + "\n"
    if out_dir:
        out = _prepare_out(out_dir)
        (out / "graph_dump.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    cfg, _, _, _ = parse_config(args)
    # Small fixture: frozen rollouts under random parameters.
    fixture_cfg = TrainConfig(
        n_agents=args.check_agents, rounds=args.check_rounds, seed=cfg.seed,
        attack_count=min(2, args.check_agents), transition_rounds=(args.check_rounds,),
        d_emb=cfg.d_emb, k_max=cfg.k_max, hidden=cfg.hidden, mlp_hidden=cfg.mlp_hidden,
        epsilon=EpsilonSchedule(start=0.1, end=0.1, decay_iterations=0),
    )
    params = init_params(cfg.seed + 1, fixture_cfg.dims)
    backend = make_backend(fixture_cfg)
    queries = synthetic_queries(4, seed=cfg.seed)
    records = []
    for episode_id, query in enumerate(queries):
        from .trainer import _episode_schedule

        schedule = _episode_schedule(fixture_cfg, episode_id)
        records.append(
            run_episode(query, params, fixture_cfg, schedule, "train", episode_id, backend,
                        epsilon=0.1)
        )

    def loss_fn(p):
        return surrogate_loss(records, p, fixture_cfg.gamma, 0.25, fixture_cfg.rounds)

    rng = rng_stream(cfg.seed, TAG_GRADCHECK)
    worst = grad_check(params, loss_fn, n_probes=args.probes, eps=args.fd_eps, rng=rng)
    print(f"grad-check: max relative error {worst:.3e} over {args.probes} probes (eps={args.fd_eps})")
    if worst > args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance}")
        return 1
    print(f"PASS: within tolerance {args.tolerance}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyncomm",
        description="Learned dynamic communication topologies for multi-agent QA.",
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (or a run snapshot)")
        p.add_argument("--seed", type=int)
        p.add_argument("--agents", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--attack-count", dest="attack_count", type=int)
        p.add_argument("--transition-rounds", dest="transition_rounds",
                       help="comma-separated candidate rounds, e.g. 3,4")
        p.add_argument("--budget-in", dest="budget_in", type=int)
        p.add_argument("--budget-out", dest="budget_out", type=int)
        p.add_argument("--backend", choices=["synthetic", "http"])
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
        p.add_argument("--dataset")
        p.add_argument("--eval-dataset", dest="eval_dataset")
        p.add_argument("--ablation", choices=["none", "no_ranking", "no_removal"])
        p.add_argument("--no-trace", dest="no_trace", action="store_true")
        p.add_argument("--eval-episodes", dest="eval_episodes", type=int)
        p.add_argument("--eval-interval", dest="eval_interval", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)

    p_train = sub.add_parser("train", help="run the full training loop")
    add_common(p_train)
    p_train.add_argument("--iterations", type=int)
    p_train.add_argument("--epsilon-start", dest="epsilon_start", type=float)
    p_train.add_argument("--epsilon-end", dest="epsilon_end", type=float)
    p_train.add_argument("--log-every", type=int, default=0)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a frozen checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int)
    p_eval.set_defaults(func=cmd_eval)

    p_sim = sub.add_parser("simulate", help="run a static topology preset")
    add_common(p_sim)
    p_sim.add_argument("--preset", choices=["complete", "random"], required=True)
    p_sim.add_argument("--p-edge", dest="p_edge", type=float, default=0.5)
    p_sim.add_argument("--episodes", type=int)
    p_sim.set_defaults(func=cmd_simulate)

    p_dump = sub.add_parser("graph-dump", help="edge lists for one episode")
    add_common(p_dump)
    p_dump.add_argument("--checkpoint")
    p_dump.add_argument("--episode", type=int, default=0)
    p_dump.add_argument("--query-index", dest="query_index", type=int, default=0)
    p_dump.set_defaults(func=cmd_graph_dump)

    p_gc = sub.add_parser("grad-check", help="finite-difference gradient oracle")
    add_common(p_gc)
    p_gc.add_argument("--probes", type=int, default=100)
    p_gc.add_argument("--fd-eps", dest="fd_eps", type=float, default=1e-5)
    p_gc.add_argument("--tolerance", type=float, default=1e-4)
    p_gc.add_argument("--check-agents", dest="check_agents", type=int, default=4)
    p_gc.add_argument("--check-rounds", dest="check_rounds", type=int, default=3)
    p_gc.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DyncommError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
