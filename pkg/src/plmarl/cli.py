"""Command-line front end: ``plmarl train|eval|oracle|selfcheck``.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or arguments,
3 unsupported checkpoint version.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import nn
from ._validation import SizeError
from .config import ConfigError, RunConfig, load_config
from .envs import tabular_from_spec, key_agent_of_state
from .oracle import MAX_ORDER_AGENTS, first_mover_certificate, oracle_report
from .policy import Policy
from .training import METRIC_FIELDS, evaluate, train_loop

log = logging.getLogger("plmarl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERSION = 0, 1, 2, 3
MAX_ORACLE_JOINT_ACTIONS = 4096


class UsageError(Exception):
    """Bad command-line arguments; maps to exit code 2."""


# ---- output helpers ----------------------------------------------------------

def write_json(path, obj) -> None:
    nn.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def metrics_jsonl(records) -> bytes:
    return "".join(json.dumps(r) + "\n" for r in records).encode()


def metrics_csv(records) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow(["" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k] for k in METRIC_FIELDS])
    return buf.getvalue().encode()


def flush_metrics(out_dir, records) -> None:
    nn.atomic_write_bytes(os.path.join(out_dir, "metrics.jsonl"), metrics_jsonl(records))
    nn.atomic_write_bytes(os.path.join(out_dir, "metrics.csv"), metrics_csv(records))


def optimal_order_sets(cfg: RunConfig):
    """State index -> set of oracle-optimal orders, when the env is small enough to enumerate."""
    spec = cfg.env
    if spec.n_agents > MAX_ORDER_AGENTS or spec.n_actions ** spec.n_agents > MAX_ORACLE_JOINT_ACTIONS:
        return None, None
    report = build_oracle_report(cfg)
    sets = {e["state"]: {tuple(o) for o in e["argmax_set"]} for e in report["states"]}
    return sets, report


def build_oracle_report(cfg: RunConfig) -> dict:
    spec = cfg.env
    game = tabular_from_spec(spec)
    labels = None
    if spec.kind == "key-agent-match":
        labels = {s: {"key_agent": int(s // spec.n_actions), "target": int(s % spec.n_actions)}
                  for s in range(game.n_states)}
    report = oracle_report(game, state_labels=labels)
    report["env"] = spec.to_dict()
    report["baseline_policy"] = "uniform"
    if spec.kind == "key-agent-match":
        report["key_first_certificate"] = first_mover_certificate(
            report, key_agent_of_state(spec, np.arange(game.n_states)))
    return report


def save_policy(path, policy: Policy, cfg: RunConfig, iteration: int, env_steps: int) -> None:
    meta = {**policy.metadata(), "iteration": iteration, "env_steps": env_steps,
            "env": cfg.env.to_dict(), "dtype": cfg.model.dtype}
    nn.save_checkpoint(path, policy.store, meta)


def load_policy(path, cfg: RunConfig | None = None) -> Policy:
    store, meta = nn.load_checkpoint(path)
    if meta is None:
        if cfg is None:
            raise nn.CheckpointError(f"{path}: no metadata sidecar and no config to rebuild the model")
        meta = {**cfg.model_config().to_dict(), "strategy": cfg.strategy.kind,
                "fixed_order": list(cfg.strategy.fixed_order) if cfg.strategy.fixed_order else None}
    return Policy.from_metadata(meta, store)


# ---- commands ----------------------------------------------------------------

def cmd_train(cfg: RunConfig, workers: int = 1, checkpoint: str | None = None) -> dict:
    out_dir = cfg.output_dir()
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    nn.atomic_write_bytes(os.path.join(out_dir, "config.ini"), cfg.to_ini().encode())

    seed = cfg.run.seed
    init_seq, train_seq, env_seq, eval_seq = np.random.SeedSequence(seed).spawn(4)
    if checkpoint:
        policy = load_policy(checkpoint, cfg)
        policy.store.params = {k: v.astype(cfg.dtype) for k, v in policy.store.params.items()}
    else:
        policy = Policy(cfg.model_config(), cfg.ordering(), rng=np.random.default_rng(init_seq), dtype=cfg.dtype)
    records = []

    def on_iteration(rec):
        records.append(rec)
        it = rec["iteration"]
        if it % 10 == 0:
            flush_metrics(out_dir, records)
        if it % cfg.run.checkpoint_every == 0:
            save_policy(os.path.join(ckpt_dir, f"ckpt_{it:06d}.pmat"), policy, cfg, it, rec["env_steps"])
            log.info("iteration %d  env_steps %d  mean_return %s", it, rec["env_steps"], rec["mean_return"])

    env_seed = int(env_seq.generate_state(1)[0])
    train_loop(policy, cfg.env, cfg.train, cfg.run.total_env_steps, np.random.default_rng(train_seq),
               env_seed, workers, on_iteration)
    flush_metrics(out_dir, records)
    n_iter, steps = len(records), records[-1]["env_steps"]
    save_policy(os.path.join(ckpt_dir, "final.pmat"), policy, cfg, n_iter, steps)

    optimal, _ = optimal_order_sets(cfg)
    eval_seed = int(eval_seq.generate_state(1)[0])
    ev = evaluate(policy, cfg.env, cfg.run.eval_episodes, eval_seed, optimal)
    tail = [r["mean_return"] for r in records[-10:] if r["mean_return"] is not None]
    summary = {
        "seed": seed,
        "strategy": cfg.strategy.kind,
        "iterations": n_iter,
        "env_steps": steps,
        "final_mean_return": ev["mean_return"],
        "final_train_return": float(np.mean(tail)) if tail else None,
        "p_oracle_optimal_order": ev.get("p_oracle_optimal_order"),
        "p_key_first": ev.get("p_key_first"),
        "order_distribution": ev["order_distribution"],
        "eval_episodes": cfg.run.eval_episodes,
    }
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def cmd_eval(cfg: RunConfig, checkpoint: str, episodes: int, seed: int) -> dict:
    policy = load_policy(checkpoint, cfg)
    if policy.cfg.n_agents != cfg.env.n_agents or policy.cfg.obs_dim != cfg.env.obs_dim \
            or policy.cfg.n_actions != cfg.env.n_actions:
        raise UsageError("checkpoint model does not match the configured environment")
    optimal, _ = optimal_order_sets(cfg)
    return evaluate(policy, cfg.env, episodes, seed, optimal)


def cmd_oracle(cfg: RunConfig) -> dict:
    spec = cfg.env
    if spec.n_agents > MAX_ORDER_AGENTS:
        raise SizeError(f"oracle order search supports at most {MAX_ORDER_AGENTS} agents")
    if spec.n_actions ** spec.n_agents > MAX_ORACLE_JOINT_ACTIONS:
        raise SizeError(f"joint action space {spec.n_actions}^{spec.n_agents} is too large to enumerate")
    report = build_oracle_report(cfg)
    out_dir = cfg.output_dir()
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "oracle_report.json"), report)
    return report


# ---- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plmarl", description="Decision-order learning for sequential multi-agent PPO.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")

    p = sub.add_parser("train", help="train a policy")
    common(p)
    p.add_argument("--workers", type=int, default=1, help="rollout worker processes")
    p.add_argument("--checkpoint", default=None, help="warm-start from a checkpoint")

    p = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("oracle", help="exact order analysis of a tabular-convertible env")
    common(p)

    p = sub.add_parser("selfcheck", help="run the built-in property battery")
    p.add_argument("--seed", type=int, default=0)
    return ap


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "selfcheck":
            from .selfcheck import run_selfcheck
            results = run_selfcheck(seed=args.seed, stream=sys.stdout)
            failed = [name for name, ok, _ in results if not ok]
            if failed:
                print("FAILED: " + ", ".join(failed))
                return EXIT_RUNTIME
            return EXIT_OK
        cfg = _load(args)
        if args.command == "train":
            if args.workers < 1:
                raise UsageError("--workers must be >= 1")
            summary = cmd_train(cfg, args.workers, args.checkpoint)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "eval":
            episodes = cfg.run.eval_episodes if args.episodes is None else args.episodes
            if episodes < 1:
                raise UsageError(f"--episodes must be >= 1, got {episodes}")
            result = cmd_eval(cfg, args.checkpoint, episodes, cfg.run.seed)
            print(f"mean_return {result['mean_return']:.6f}")
            for order, p in result["order_distribution"].items():
                print(f"order {order}: {p:.4f}")
            print(json.dumps(result, sort_keys=True))
        elif args.command == "oracle":
            report = cmd_oracle(cfg)
            print(json.dumps({
                "argmax": {e["state"]: e["argmax"] for e in report["states"]},
                "order_insensitive": report["order_insensitive"],
                "decomposition_residual_max": report["decomposition_residual"]["max"],
                "key_first_certificate": report.get("key_first_certificate"),
            }, sort_keys=True))
        return EXIT_OK
    except (ConfigError, UsageError, SizeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except nn.CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except Exception as exc:  # anything else is a runtime fault
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
