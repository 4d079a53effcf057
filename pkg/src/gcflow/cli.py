"""Command-line entry points for the full workflow: dataset generation,
training, evaluation, the lambda ablation, and multi-config comparison.

Reports are deterministic given (checkpoint, task, seed); wall-clock
timings go to a separate timing.txt so repeated runs produce byte-identical
reports.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .data import collect, load_dataset, save_dataset
from .evaluation import (
    EvalTask,
    PolicyActor,
    ablate_lambda,
    compare,
    evaluate,
    load_for_eval,
    load_task,
    rollout,
    subgoal_shift,
)
from .maze import make_env
from .reports import learning_curve_svg, maze_rollout_svg, read_metrics, write_csv
from .selftest import run_selftest
from .training import TrainConfig, train

__all__ = ["main"]


def _parse_list(text: str, cast):
    return [cast(x) for x in text.split(",") if x != ""]


def _cmd_gen_data(args) -> int:
    env = make_env(args.env, pad=args.pad)
    ds = collect(env, args.script, episodes=args.episodes,
                 horizon=args.horizon, seed=args.seed, noise=args.noise)
    save_dataset(ds, args.out)
    n = int(ds.lengths.sum())
    print(f"wrote {args.out}: {len(ds)} trajectories, {n} transitions, "
          f"obs_dim={ds.obs_dim}")
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_json_file(args.config)
    dataset = load_dataset(args.dataset)
    t0 = time.perf_counter()
    state = train(config, dataset, args.out, resume_from=args.resume)
    elapsed = time.perf_counter() - t0
    metrics = read_metrics(os.path.join(args.out, "metrics.csv"))
    if len(metrics["step"]):
        series = {k: metrics[k] for k in
                  ("value_loss", "high_mf_loss", "low_mf_loss")}
        svg = learning_curve_svg(metrics["step"], series,
                                 title=f"{config.algorithm} on {config.env}")
        with open(os.path.join(args.out, "curve.svg"), "w") as f:
            f.write(svg + "\n")
    with open(os.path.join(args.out, "timing.txt"), "w") as f:
        f.write(f"train_seconds={elapsed:.3f}\n")
    print(f"trained {config.algorithm} to step {state.step}; "
          f"outputs in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    state = load_for_eval(args.ckpt)
    task = load_task(args.task)
    seeds = _parse_list(args.seeds, int)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    report = evaluate(state, task, seeds)
    elapsed = time.perf_counter() - t0
    payload = report.to_dict()
    if args.dataset:
        dataset = load_dataset(args.dataset)
        payload["subgoal_shift"] = subgoal_shift(
            state, dataset, 1024, np.random.default_rng(seeds[0]))
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    write_csv(os.path.join(args.out, "report.csv"),
              [{"seed": s, "success": r}
               for s, r in zip(report.seeds, report.per_seed)],
              ["seed", "success"])
    env = make_env(task.env, pad=state.dataset.obs_dim - 2,
                   goal_radius=task.epsilon)
    paths = []
    goals = []
    rng = np.random.default_rng(seeds[0])
    for start, goal in task.pairs[:4]:
        res = rollout(PolicyActor(state), env, start, goal, task.horizon, rng)
        paths.append(res.path)
        goals.append(goal)
    with open(os.path.join(args.out, "rollouts.svg"), "w") as f:
        f.write(maze_rollout_svg(env, paths, goals,
                                 title=f"{state.config.algorithm} rollouts")
                + "\n")
    with open(os.path.join(args.out, "timing.txt"), "w") as f:
        f.write(f"eval_seconds={elapsed:.3f}\n")
    print(f"success mean={report.mean:.3f} std={report.std:.3f} "
          f"({report.forwards_per_action:.1f} forwards/action); "
          f"report in {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    base = TrainConfig.from_json_file(args.config)
    dataset = load_dataset(args.dataset)
    task = load_task(args.task)
    rows = ablate_lambda(base, dataset, _parse_list(args.lambdas, float),
                         _parse_list(args.seeds, int), task, args.out)
    for r in rows:
        print(f"lam={r['lam']} seed={r['seed']} success={r['success']:.3f}")
    return 0


def _cmd_compare(args) -> int:
    configs = [TrainConfig.from_json_file(p)
               for p in _parse_list(args.configs, str)]
    dataset = load_dataset(args.dataset)
    task = load_task(args.task)
    report = compare(configs, dataset, task, _parse_list(args.seeds, int),
                     args.out)
    for name, mean in report["means"].items():
        print(f"{name}: mean success {mean:.3f}")
    for pair, gap in report["gaps"].items():
        print(f"gap {pair}: {gap:+.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gcflow",
        description="offline hierarchical goal-conditioned control with "
                    "one-step flow policies")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="collect a scripted-policy dataset")
    g.add_argument("--env", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--horizon", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--script", default="waypoint-noisy",
                   choices=["waypoint-noisy", "random-walk"])
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--pad", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="run the offline trainer")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None,
                   help="checkpoint directory to continue from")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a task file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--seeds", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dataset", default=None,
                   help="optional dataset for the subgoal-shift diagnostic")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate-lambda",
                       help="sweep the regularizer weight across seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--task", required=True)
    a.add_argument("--lambdas", required=True)
    a.add_argument("--seeds", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=_cmd_ablate)

    c = sub.add_parser("compare", help="train and evaluate several configs")
    c.add_argument("--configs", required=True,
                   help="comma-separated config paths")
    c.add_argument("--dataset", required=True)
    c.add_argument("--task", required=True)
    c.add_argument("--seeds", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=_cmd_compare)

    s = sub.add_parser("selftest", help="run quick install sanity checks")
    s.set_defaults(fn=lambda args: run_selftest())
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
