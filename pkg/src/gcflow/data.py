"""Trajectory datasets: scripted collection, on-disk format, batch sampling.

File format: one UTF-8 JSON header line (version, dims, per-trajectory
lengths, provenance) terminated by a newline, then a little-endian float32
payload holding, for each trajectory in order, all states row-major
followed by all actions row-major.

sample_batch draws (s_h, a_h, s_{h+1}, s_{h+k}, g) tuples. The goal g is a
mixture: the current state itself, a geometrically-discounted future state
of the same trajectory, or a uniformly random dataset state. Every random
stream is drawn for every element each call in a fixed order, so a given
(dataset, rng state) pair yields bitwise-identical batches regardless of
the mixture proportions chosen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation
from .maze import MazeEnv, bfs_path, free_cells

__all__ = [
    "Trajectory",
    "Dataset",
    "GoalBatch",
    "collect",
    "sample_batch",
    "save_dataset",
    "load_dataset",
    "SOURCE_CURRENT",
    "SOURCE_FUTURE",
    "SOURCE_RANDOM",
]

SOURCE_CURRENT = 0
SOURCE_FUTURE = 1
SOURCE_RANDOM = 2

_FORMAT_VERSION = 1


@dataclass
class Trajectory:
    states: np.ndarray   # (H+1, obs_dim) float32
    actions: np.ndarray  # (H, act_dim) float32

    def __post_init__(self):
        self.states = np.asarray(self.states, np.float32)
        self.actions = np.asarray(self.actions, np.float32)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ContractViolation("trajectory arrays must be 2-D")
        if len(self.states) != len(self.actions) + 1:
            raise ContractViolation(
                f"need len(states) == len(actions)+1, got "
                f"{len(self.states)} vs {len(self.actions)}"
            )

    @property
    def length(self) -> int:
        return len(self.actions)


class Dataset:
    """Immutable trajectory collection with flat views for fast sampling."""

    def __init__(self, trajectories: list[Trajectory], meta: dict | None = None):
        if not trajectories:
            raise ContractViolation("dataset must contain at least one trajectory")
        obs_dim = trajectories[0].states.shape[1]
        act_dim = trajectories[0].actions.shape[1]
        for tr in trajectories:
            if tr.states.shape[1] != obs_dim or tr.actions.shape[1] != act_dim:
                raise ContractViolation("inconsistent dims across trajectories")
            if tr.length < 1:
                raise ContractViolation("every trajectory needs >= 2 states")
        self.trajectories = list(trajectories)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.meta = dict(meta or {})
        self.lengths = np.array([tr.length for tr in trajectories], np.int64)
        # state_offsets[n] indexes trajectory n's state 0 inside states_flat
        self.state_offsets = np.concatenate(
            [[0], np.cumsum(self.lengths + 1)])[:-1]
        self.action_offsets = np.concatenate(
            [[0], np.cumsum(self.lengths)])[:-1]
        self.states_flat = np.concatenate([tr.states for tr in trajectories])
        self.actions_flat = np.concatenate([tr.actions for tr in trajectories])

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_states(self) -> int:
        return len(self.states_flat)


@dataclass
class GoalBatch:
    s_h: np.ndarray     # (B, obs_dim)
    a_h: np.ndarray     # (B, act_dim)
    s_next: np.ndarray  # (B, obs_dim)
    s_sub: np.ndarray   # (B, obs_dim), state at min(h+k, H_n)
    g: np.ndarray       # (B, obs_dim)
    source: np.ndarray  # (B,) int8, SOURCE_* codes

    def __post_init__(self):
        b = len(self.s_h)
        for name in ("a_h", "s_next", "s_sub", "g", "source"):
            if len(getattr(self, name)) != b:
                raise ContractViolation(f"GoalBatch field {name} length mismatch")


def collect(env: MazeEnv, script: str, episodes: int, horizon: int,
            seed: int, noise: float = 0.3) -> Dataset:
    """Generate reward-free trajectories with a scripted controller.

    "waypoint-noisy": per episode, sample distinct free start/goal cells,
    follow the BFS shortest path between cell centers with proportional
    steering plus additive uniform action noise, and hover at the goal until
    the fixed horizon runs out. "random-walk": uniform actions.
    """
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    if script not in ("waypoint-noisy", "random-walk"):
        raise ContractViolation(f"unknown script '{script}'")
    rng = np.random.default_rng(seed)
    cells = free_cells(env.grid)
    trajectories = []
    for _ in range(episodes):
        if script == "random-walk":
            start = np.array(cells[rng.integers(len(cells))][::-1]) + 0.5
            start = start + rng.uniform(-0.2, 0.2, 2)
            env.reset(start)
            states = [env.observe()]
            actions = []
            for _ in range(horizon):
                a = rng.uniform(-1, 1, 2).astype(np.float32)
                states.append(env.step(a).copy())
                actions.append(a)
            trajectories.append(Trajectory(np.stack(states), np.stack(actions)))
            continue

        path = None
        for _ in range(50):
            i, j = rng.choice(len(cells), 2, replace=False)
            path = bfs_path(env.grid, cells[i], cells[j])
            if path is not None:
                break
        if path is None:
            raise RuntimeError("no reachable goal cell found after 50 retries")
        start = np.array([path[0][1] + 0.5, path[0][0] + 0.5])
        start = start + rng.uniform(-0.2, 0.2, 2)
        waypoints = [np.array([c + 0.5, r + 0.5]) for r, c in path[1:]]
        if not waypoints:
            waypoints = [np.array([path[0][1] + 0.5, path[0][0] + 0.5])]
        env.reset(start)
        states = [env.observe()]
        actions = []
        wp = 0
        for _ in range(horizon):
            pos = env.state
            while (wp < len(waypoints) - 1
                   and np.linalg.norm(pos - waypoints[wp]) < 0.3):
                wp += 1
            desired = (waypoints[wp] - pos) / env.max_step
            a = np.clip(desired, -1, 1)
            if noise > 0:
                a = a + rng.uniform(-noise, noise, 2)
            a = np.clip(a, -1, 1).astype(np.float32)
            states.append(env.step(a).copy())
            actions.append(a)
        trajectories.append(Trajectory(np.stack(states), np.stack(actions)))
    meta = {"env": env.name, "seed": seed, "script": script,
            "noise": noise, "horizon": horizon}
    return Dataset(trajectories, meta)


def sample_batch(ds: Dataset, batch_size: int, k: int,
                 goal_mix: tuple[float, float, float], gamma: float,
                 rng: np.random.Generator) -> GoalBatch:
    """Draw B training tuples with the three-way goal mixture."""
    if batch_size <= 0:
        raise ContractViolation("batch_size must be positive")
    if k < 1:
        raise ContractViolation("k must be >= 1")
    p_cur, p_traj, p_rand = goal_mix
    if abs(p_cur + p_traj + p_rand - 1.0) > 1e-6 or min(goal_mix) < 0:
        raise ContractViolation(f"goal_mix {goal_mix} must be a distribution")
    if not (0.0 < gamma < 1.0):
        raise ContractViolation("gamma must be in (0, 1)")

    # fixed draw order; every stream drawn regardless of mixture
    traj = rng.integers(0, len(ds), batch_size)
    lengths = ds.lengths[traj]
    h = rng.integers(0, lengths)
    u = rng.random(batch_size)
    delta = rng.geometric(1.0 - gamma, batch_size)
    rand_state = rng.integers(0, ds.n_states, batch_size)

    base = ds.state_offsets[traj]
    s_h = ds.states_flat[base + h]
    s_next = ds.states_flat[base + np.minimum(h + 1, lengths)]
    s_sub = ds.states_flat[base + np.minimum(h + k, lengths)]
    a_h = ds.actions_flat[ds.action_offsets[traj] + h]

    source = np.where(u < p_cur, SOURCE_CURRENT,
                      np.where(u < p_cur + p_traj, SOURCE_FUTURE,
                               SOURCE_RANDOM)).astype(np.int8)
    future_idx = base + np.minimum(h + delta, lengths)
    g = s_h.copy()
    fut = source == SOURCE_FUTURE
    g[fut] = ds.states_flat[future_idx[fut]]
    rnd = source == SOURCE_RANDOM
    g[rnd] = ds.states_flat[rand_state[rnd]]
    return GoalBatch(s_h=s_h.copy(), a_h=a_h.copy(), s_next=s_next.copy(),
                     s_sub=s_sub.copy(), g=g, source=source)


def save_dataset(ds: Dataset, path: str) -> None:
    header = {
        "version": _FORMAT_VERSION,
        "obs_dim": ds.obs_dim,
        "act_dim": ds.act_dim,
        "traj_lengths": ds.lengths.tolist(),
        "env": ds.meta.get("env", ""),
        "seed": ds.meta.get("seed", 0),
        "meta": ds.meta,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for tr in ds.trajectories:
            f.write(np.asarray(tr.states, "<f4").tobytes())
            f.write(np.asarray(tr.actions, "<f4").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContractViolation(f"malformed dataset header: {e}") from None
    if header.get("version") != _FORMAT_VERSION:
        raise ContractViolation(f"unsupported dataset version {header.get('version')}")
    obs_dim = header["obs_dim"]
    act_dim = header["act_dim"]
    lengths = header["traj_lengths"]
    expected = sum(((h + 1) * obs_dim + h * act_dim) * 4 for h in lengths)
    if len(payload) != expected:
        raise ContractViolation(
            f"dataset payload is {len(payload)} bytes, header implies {expected}"
        )
    trajectories = []
    offset = 0
    for h in lengths:
        ns = (h + 1) * obs_dim
        na = h * act_dim
        states = np.frombuffer(payload, "<f4", ns, offset).reshape(h + 1, obs_dim)
        offset += ns * 4
        actions = np.frombuffer(payload, "<f4", na, offset).reshape(h, act_dim)
        offset += na * 4
        trajectories.append(Trajectory(states.copy(), actions.copy()))
    return Dataset(trajectories, header.get("meta", {}))
