"""Goal-reaching evaluation: one-step action selection, rollouts, task
files, and the comparison/ablation harnesses built on top of them.

Action selection for the hierarchical generators is two network
evaluations: the high level proposes a subgoal representation from
(state, goal), the low level decodes an action from (state, subgoal).
Both levels carry forward-call counters so reports can certify the
per-action budget. Rollouts terminate on success; the success check runs
before the first action so a trivial task scores immediately.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import ContractViolation
from .data import Dataset, Trajectory, sample_batch
from .encoder import encode_np
from .maze import MazeEnv, bfs_path, make_env
from .policy import gaussian_mean, ode_sample, one_step_sample
from .training import (
    TrainConfig,
    TrainState,
    goal_features,
    load_train_checkpoint,
    train,
)

__all__ = [
    "EvalTask",
    "load_task",
    "save_task",
    "make_nav_task",
    "RolloutResult",
    "PolicyActor",
    "WaypointActor",
    "rollout",
    "EvalReport",
    "evaluate",
    "load_for_eval",
    "energy_distance",
    "subgoal_shift",
    "ablate_lambda",
    "compare",
]


@dataclass
class EvalTask:
    env: str
    pairs: list          # [((x, y), (gx, gy)), ...] start/goal positions
    horizon: int
    episodes: int
    epsilon: float

    def __post_init__(self):
        if not self.pairs:
            raise ContractViolation("task needs at least one start/goal pair")
        self.pairs = [(tuple(map(float, s)), tuple(map(float, g)))
                      for s, g in self.pairs]
        if self.horizon < 0:
            raise ContractViolation("horizon must be >= 0")
        if self.episodes < 1:
            raise ContractViolation("episodes must be >= 1")
        if self.epsilon <= 0:
            raise ContractViolation("epsilon must be positive")

    def to_dict(self) -> dict:
        return {"env": self.env, "pairs": [[list(s), list(g)]
                                           for s, g in self.pairs],
                "horizon": self.horizon, "episodes": self.episodes,
                "epsilon": self.epsilon}


def load_task(path: str) -> EvalTask:
    with open(path) as f:
        d = json.load(f)
    return EvalTask(**d)


def save_task(task: EvalTask, path: str) -> None:
    with open(path, "w") as f:
        json.dump(task.to_dict(), f, indent=2)
        f.write("\n")


def make_nav_task(env_name: str, n_pairs: int = 10, min_cells: int = 5,
                  episodes: int = 5, horizon: int = 200,
                  epsilon: float = 0.5, seed: int = 0) -> EvalTask:
    """Deterministically sample start/goal cell-center pairs whose BFS
    path spans at least min_cells cells, so every pair is reachable but
    none is trivial."""
    from .maze import free_cells
    env = make_env(env_name)
    cells = free_cells(env.grid)
    rng = np.random.default_rng(seed)
    pairs = []
    seen = set()
    attempts = 0
    while len(pairs) < n_pairs:
        attempts += 1
        if attempts > 10_000:
            raise ContractViolation(
                f"could not find {n_pairs} pairs with min_cells={min_cells} "
                f"on '{env_name}'")
        i, j = (int(x) for x in rng.integers(0, len(cells), 2))
        if i == j or (i, j) in seen:
            continue
        seen.add((i, j))
        a, b = cells[i], cells[j]
        path = bfs_path(env.grid, a, b)
        if path is None or len(path) < min_cells + 1:
            continue
        pairs.append(((a[1] + 0.5, a[0] + 0.5), (b[1] + 0.5, b[0] + 0.5)))
    return EvalTask(env=env_name, pairs=pairs, horizon=horizon,
                    episodes=episodes, epsilon=epsilon)


# ---------------------------------------------------------------------------
# actors

class PolicyActor:
    """Trained hierarchy as a reactive controller. The subgoal
    representation refreshes every config.subgoal_every steps and is
    reused in between."""

    def __init__(self, state: TrainState):
        self.state = state
        self.z = None
        self.count = 0

    def reset(self) -> None:
        self.z = None
        self.count = 0

    def _sample(self, policy, cond: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
        st = self.state
        if st.mean_flow:
            if st.config.algorithm == "fm-multistep":
                return ode_sample(policy, cond, st.config.ode_steps, rng)[0]
            return one_step_sample(policy, cond, rng)[0]
        return gaussian_mean(policy, cond)[0]

    def act(self, obs: np.ndarray, goal_obs: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
        st = self.state
        if self.z is None or self.count % st.config.subgoal_every == 0:
            gf = goal_features(st, goal_obs[None, :])[0]
            cond_high = np.concatenate([obs, gf])[None, :]
            self.z = self._sample(st.high, cond_high, rng)
        self.count += 1
        cond_low = np.concatenate([obs, self.z])[None, :]
        return self._sample(st.low, cond_low, rng)


class WaypointActor:
    """Shortest-path controller used as a rollout oracle: replan with BFS
    from the current cell each step and steer at the next cell center."""

    def __init__(self, env: MazeEnv):
        self.env = env

    def reset(self) -> None:
        pass

    def act(self, obs: np.ndarray, goal_obs: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
        pos = np.asarray(obs[:2], np.float64)
        goal = np.asarray(goal_obs[:2], np.float64)
        path = bfs_path(self.env.grid, self.env.cell_of(pos),
                        self.env.cell_of(goal))
        if path is None or len(path) < 2:
            target = goal
        else:
            r, c = path[1]
            target = np.array([c + 0.5, r + 0.5])
            if len(path) == 2:
                target = goal
        desired = (target - pos) / self.env.max_step
        return np.clip(desired, -1, 1).astype(np.float32)


@dataclass
class RolloutResult:
    success: bool
    steps: int
    path: np.ndarray  # (steps+1, 2) positions visited


def rollout(actor, env: MazeEnv, start, goal_pos, horizon: int,
            rng: np.random.Generator) -> RolloutResult:
    """Run until success or the horizon; success is checked before every
    action, including the first."""
    obs = env.reset(start)
    goal_obs = np.zeros(env.obs_dim, np.float32)
    goal_obs[:2] = np.asarray(goal_pos, np.float32)
    actor.reset()
    path = [env.state.copy()]
    for _ in range(horizon):
        if env.at_goal(goal_pos):
            return RolloutResult(True, len(path) - 1, np.array(path))
        a = actor.act(obs, goal_obs, rng)
        obs = env.step(a)
        path.append(env.state.copy())
    return RolloutResult(bool(env.at_goal(goal_pos)), len(path) - 1,
                         np.array(path))


# ---------------------------------------------------------------------------
# evaluation harness

@dataclass
class EvalReport:
    task: EvalTask
    seeds: list
    per_seed: list
    mean: float
    std: float
    forwards_per_action: float
    meta: dict

    def to_dict(self) -> dict:
        return {"task": self.task.to_dict(), "seeds": list(self.seeds),
                "per_seed": list(self.per_seed), "mean": self.mean,
                "std": self.std,
                "forwards_per_action": self.forwards_per_action,
                "meta": dict(self.meta)}


def evaluate(state: TrainState, task: EvalTask, seeds) -> EvalReport:
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ContractViolation("need at least one evaluation seed")
    env = make_env(task.env, pad=state.dataset.obs_dim - 2,
                   goal_radius=task.epsilon)
    if env.obs_dim != state.dataset.obs_dim:
        raise ContractViolation("task env dims do not match the policy")
    actor = PolicyActor(state)
    before = state.high.forward_calls + state.low.forward_calls
    total_actions = 0
    per_seed = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        successes = 0
        for start, goal in task.pairs:
            for _ in range(task.episodes):
                res = rollout(actor, env, start, goal, task.horizon, rng)
                successes += int(res.success)
                total_actions += res.steps
        per_seed.append(successes / (len(task.pairs) * task.episodes))
    calls = state.high.forward_calls + state.low.forward_calls - before
    mean = float(np.mean(per_seed))
    std = float(np.std(per_seed, ddof=1)) if len(seeds) > 1 else 0.0
    return EvalReport(
        task=task, seeds=seeds, per_seed=per_seed, mean=mean, std=std,
        forwards_per_action=calls / total_actions if total_actions else 0.0,
        meta={"algorithm": state.config.algorithm,
              "terminate_on_success": True,
              "subgoal_every": state.config.subgoal_every,
              "total_actions": total_actions,
              "epsilon": task.epsilon},
    )


def load_for_eval(ckpt_dir: str) -> TrainState:
    """Restore a checkpoint for evaluation only, with a placeholder dataset
    carrying the right dimensions."""
    from .nn import load_checkpoint
    _, meta = load_checkpoint(ckpt_dir)
    obs_dim, act_dim = int(meta["obs_dim"]), int(meta["act_dim"])
    stub = Dataset([Trajectory(np.zeros((2, obs_dim), np.float32),
                               np.zeros((1, act_dim), np.float32))])
    return load_train_checkpoint(ckpt_dir, stub)


# ---------------------------------------------------------------------------
# diagnostics

def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Energy distance sqrt(2 E|X-Y| - E|X-X'| - E|Y-Y'|) between two
    sample clouds (expectations over all cross/within pairs)."""
    x = np.atleast_2d(np.asarray(x, np.float64))
    y = np.atleast_2d(np.asarray(y, np.float64))
    if len(x) < 2 or len(y) < 2:
        raise ContractViolation("energy distance needs >= 2 samples per side")
    a = cdist(x, y).mean()
    b = cdist(x, x).mean()
    c = cdist(y, y).mean()
    return float(np.sqrt(max(0.0, 2.0 * a - b - c)))


def subgoal_shift(state: TrainState, dataset: Dataset, n: int,
                  rng: np.random.Generator) -> float:
    """Mean distance between generated subgoal representations and the
    encoded k-step states they imitate; a train/inference input-shift
    diagnostic for the low level, logged rather than corrected."""
    cfg = state.config
    batch = sample_batch(dataset, n, cfg.k, cfg.goal_mix, cfg.gamma, rng)
    z_data = encode_np(state.bundle.encoder, batch.s_h, batch.s_sub)
    cond = np.concatenate([batch.s_h, goal_features(state, batch.g)], axis=1)
    if state.mean_flow:
        if cfg.algorithm == "fm-multistep":
            z_gen = ode_sample(state.high, cond, cfg.ode_steps, rng)
        else:
            z_gen = one_step_sample(state.high, cond, rng)
    else:
        z_gen = gaussian_mean(state.high, cond)
    return float(np.linalg.norm(z_gen - z_data, axis=1).mean())


# ---------------------------------------------------------------------------
# multi-run harnesses

def ablate_lambda(base: TrainConfig, dataset: Dataset, lambdas, seeds,
                  task: EvalTask, out_dir: str) -> list[dict]:
    """Train and evaluate every (lambda, seed) combination; one result row
    each, written to out_dir/ablation.csv."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for lam in lambdas:
        for seed in seeds:
            cfg = replace(base, lam=float(lam), seed=int(seed))
            run_dir = os.path.join(out_dir, f"lam{lam}_seed{seed}")
            state = train(cfg, dataset, run_dir)
            rep = evaluate(state, task, [seed])
            rows.append({"lam": float(lam), "seed": int(seed),
                         "success": rep.mean,
                         "forwards_per_action": rep.forwards_per_action})
    with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
        f.write("lam,seed,success,forwards_per_action\n")
        for r in rows:
            f.write(f"{r['lam']},{r['seed']},{r['success']},"
                    f"{r['forwards_per_action']}\n")
    return rows


def compare(configs: list[TrainConfig], dataset: Dataset, task: EvalTask,
            seeds, out_dir: str) -> dict:
    """Train each config at each seed, evaluate on the shared task, and
    emit a cell matrix plus pairwise mean gaps."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, cfg in enumerate(configs):
        names.append(f"cfg{i}-{cfg.algorithm}")
    cells = {}
    means = {}
    forwards = {}
    for name, cfg in zip(names, configs):
        cells[name] = {}
        forwards[name] = {}
        for seed in seeds:
            run_dir = os.path.join(out_dir, f"{name}_seed{seed}")
            state = train(replace(cfg, seed=int(seed)), dataset, run_dir)
            rep = evaluate(state, task, [int(seed)])
            cells[name][str(seed)] = rep.mean
            forwards[name][str(seed)] = rep.forwards_per_action
        vals = list(cells[name].values())
        means[name] = float(np.mean(vals))
    gaps = {}
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            gaps[f"{names[i]} vs {names[j]}"] = means[names[i]] - means[names[j]]
    report = {"task": task.to_dict(), "seeds": [int(s) for s in seeds],
              "cells": cells, "means": means, "gaps": gaps,
              "forwards_per_action": forwards}
    with open(os.path.join(out_dir, "compare.json"), "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    return report
