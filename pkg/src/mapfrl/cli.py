"""Command-line entry points."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .env import EnvConfig
from .expert import joint_bfs_optimal, prioritized_plan
from .metrics import SuiteEntry, evaluate, run_suite, suite_csv
from .obs import Observation, format_observation
from .policy import NetConfig
from .tiebreak import TIEBREAK_MODES, TieBreakConfig
from .train import TrainConfig, load_policy, train_loop
from .world import (
    format_map,
    format_scenario,
    generate_map,
    read_map,
    read_scenario,
    render,
    sample_agents,
)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_map(args) -> int:
    grid = generate_map(args.size, args.density, np.random.default_rng(args.seed))
    _emit(format_map(grid), args.out)
    return 0


def cmd_gen_scenario(args) -> int:
    grid = read_map(args.map)
    starts, goals = sample_agents(grid, args.agents, np.random.default_rng(args.seed))
    _emit(format_scenario(starts, goals), args.out)
    return 0


def _train_config(args) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if args.config else TrainConfig().to_dict()
    overrides = {
        "seed": args.seed, "total_steps": args.total_steps, "lr": args.lr, "workers": args.workers,
        "n_agents": args.agents, "epochs": args.epochs, "imitation_ratio": args.imitation_ratio,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.world_sizes:
        base["world_sizes"] = args.world_sizes
    if args.density is not None:
        base["density"] = args.density
    if args.small_net:
        base["net"] = NetConfig.small().to_dict()
    if args.comm_mode:
        base["net"]["comm_mode"] = args.comm_mode
    if args.tiebreak:
        base["tiebreak"]["mode"] = args.tiebreak
    if args.no_intrinsic:
        base["env"]["intrinsic"] = False
    if args.no_blocking:
        base["env"]["blocking_penalty"] = False
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    trainer = train_loop(cfg, args.out, max_iterations=args.max_iterations, progress=True)
    print(f"trained {trainer.env_steps} steps over {trainer.iteration} iterations -> {args.out}")
    return 0


def _load(args):
    net, meta = load_policy(args.checkpoint)
    env_cfg = EnvConfig(fov=net.cfg.fov)
    tiebreak = TieBreakConfig()
    if "train" in meta:
        trained = TrainConfig.from_dict(meta["train"])
        env_cfg, tiebreak = trained.env, trained.tiebreak
    if args.tiebreak:
        tiebreak = TieBreakConfig(mode=args.tiebreak, mu=tiebreak.mu)
    return net, meta, env_cfg, tiebreak


def _renderer(dump_obs: bool):
    def show(k: int, env) -> None:
        if k != 0:
            return
        print(f"-- step {env.state.step}")
        print(render(env.state))
        if dump_obs:
            maps, scalars = env.observe()
            for i in range(env.n_agents):
                print(f"agent {i}")
                print(format_observation(Observation(maps[i], scalars[i])))

    return show


def cmd_eval(args) -> int:
    net, meta, env_cfg, tiebreak = _load(args)
    entry = SuiteEntry(args.agents, args.size, args.density, args.episodes, args.seed)
    observer = _renderer(args.dump_obs) if (args.render or args.dump_obs) else None
    report = evaluate(net, entry, env_cfg, tiebreak, greedy=args.greedy,
                      intrinsic_active=meta.get("intrinsic_active", True), observer=observer)
    if args.csv:
        Path(args.csv).write_text(report.episodes_csv())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    print(suite_csv([report]), end="")
    return 0


def _suite_entries(path) -> List[SuiteEntry]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("entries", [])
    return [SuiteEntry(**e) for e in data]


def cmd_suite(args) -> int:
    entries = _suite_entries(args.suite)
    if not entries:
        _emit(suite_csv([]), args.out)
        return 0
    net, meta, env_cfg, tiebreak = _load(args)
    reports = run_suite(net, entries, env_cfg, tiebreak, greedy=args.greedy,
                        intrinsic_active=meta.get("intrinsic_active", True))
    _emit(suite_csv(reports), args.out)
    return 0


def cmd_plan(args) -> int:
    grid = read_map(args.map)
    starts, goals = read_scenario(args.scenario)
    plan = prioritized_plan(grid, starts, goals, np.random.default_rng(args.seed), max_orders=args.orders)
    if plan is None:
        print("no plan found", file=sys.stderr)
        return 1
    print(f"makespan {plan.makespan}")
    for i, row in enumerate(plan.as_strings()):
        print(f"{i} {row}")
    return 0


def cmd_oracle(args) -> int:
    grid = read_map(args.map)
    starts, goals = read_scenario(args.scenario)
    makespan = joint_bfs_optimal(grid, starts, goals)
    if makespan is None:
        print("infeasible")
        return 1
    print(f"makespan {makespan}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapfrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-map", help="random map file")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--density", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_map)

    p = sub.add_parser("gen-scenario", help="random starts and goals for a map")
    p.add_argument("--map", required=True)
    p.add_argument("--agents", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_scenario)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--agents", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--imitation-ratio", type=float)
    p.add_argument("--world-sizes", type=int, nargs="+")
    p.add_argument("--density", type=float, nargs=3, metavar=("LOW", "PEAK", "HIGH"))
    p.add_argument("--small-net", action="store_true", help="d_model 64 network")
    p.add_argument("--comm-mode", choices=["global", "local", "self_only", "none"])
    p.add_argument("--tiebreak", choices=TIEBREAK_MODES)
    p.add_argument("--no-intrinsic", action="store_true")
    p.add_argument("--no-blocking", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("suite", cmd_suite)):
        p = sub.add_parser(name, help="evaluate a checkpoint" if name == "eval" else "evaluate over a suite file")
        p.add_argument("--checkpoint", required=name == "eval")
        p.add_argument("--greedy", action="store_true", help="argmax instead of sampling")
        p.add_argument("--tiebreak", choices=TIEBREAK_MODES)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--agents", type=int, required=True)
            p.add_argument("--size", type=int, required=True)
            p.add_argument("--density", type=float, default=0.0)
            p.add_argument("--episodes", type=int, default=100)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--csv", help="per-episode rows")
            p.add_argument("--json")
            p.add_argument("--render", action="store_true", help="print ASCII frames of episode 0")
            p.add_argument("--dump-obs", action="store_true", help="also print episode 0 observations")
        else:
            p.add_argument("--suite", required=True, help="JSON list of {n, m, density, episodes, seed}")
            p.add_argument("--out")

    for name, func in (("plan", cmd_plan), ("oracle", cmd_oracle)):
        p = sub.add_parser(name, help="prioritized planner" if name == "plan" else "optimal joint BFS (tiny instances)")
        p.add_argument("--map", required=True)
        p.add_argument("--scenario", required=True)
        p.set_defaults(func=func)
        if name == "plan":
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--orders", type=int, default=10)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "suite" and not args.checkpoint:
        entries = _suite_entries(args.suite)
        if entries:
            raise SystemExit("suite: --checkpoint is required for a non-empty suite")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
