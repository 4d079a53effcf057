"""Kinematic point-maze environments and scripted data collection.

A maze is a boolean occupancy grid (True = wall, border always wall) over
unit cells. The agent is a point at continuous position (x, y) with
x across columns, y down rows; cell = (row=floor(y), col=floor(x)).
Actions live in [-1,1]^2 and are scaled by max_step, which is < 1 cell, so
one step crosses at most one cell boundary per axis. Collision is
axis-separable: the x displacement is applied and clamped against walls at
the current row, then y at the resulting column, each clamp landing a small
margin inside the free cell.

Layouts: "small" and "medium" are corridor mazes; "fork" is a ring around a
solid block, giving exactly two disjoint equal-length routes between
opposite sides (deliberately bimodal subgoal structure); "corridor" is a
straight hallway used by tests.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation

__all__ = ["MazeEnv", "make_env", "LAYOUTS", "bfs_path", "free_cells"]

LAYOUTS = {
    "small": [
        "#######",
        "#...#.#",
        "#.#...#",
        "#.###.#",
        "#.....#",
        "#.#.#.#",
        "#######",
    ],
    "medium": [
        "###########",
        "#.....#...#",
        "#.###.#.#.#",
        "#...#...#.#",
        "###.#####.#",
        "#...#...#.#",
        "#.###.#.#.#",
        "#.....#.#.#",
        "#.#####.#.#",
        "#.......#.#",
        "###########",
    ],
    "fork": [
        "#########",
        "#.......#",
        "#.#####.#",
        "#.#####.#",
        "#.#####.#",
        "#.#####.#",
        "#.#####.#",
        "#.......#",
        "#########",
    ],
    "corridor": [
        "#########",
        "#.......#",
        "#########",
    ],
}


def _parse(rows: list[str]) -> np.ndarray:
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ContractViolation("ragged maze layout")
    grid = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    if not (grid[0].all() and grid[-1].all() and grid[:, 0].all()
            and grid[:, -1].all()):
        raise ContractViolation("maze border must be all wall")
    return grid


def free_cells(grid: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(~grid)
    return list(zip(rows.tolist(), cols.tolist()))


def bfs_path(grid: np.ndarray, start: tuple[int, int],
             goal: tuple[int, int]) -> list[tuple[int, int]] | None:
    """Shortest 4-connected path over free cells, inclusive of endpoints."""
    if grid[start] or grid[goal]:
        return None
    prev: dict[tuple[int, int], tuple[int, int] | None] = {start: None}
    q = deque([start])
    while q:
        cell = q.popleft()
        if cell == goal:
            path = []
            node: tuple[int, int] | None = cell
            while node is not None:
                path.append(node)
                node = prev[node]
            return path[::-1]
        r, c = cell
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not grid[nr, nc] and (nr, nc) not in prev:
                prev[(nr, nc)] = cell
                q.append((nr, nc))
    return None


@dataclass
class MazeEnv:
    grid: np.ndarray
    cell_size: float = 1.0
    max_step: float = 0.25
    goal_radius: float = 0.5
    margin: float = 1e-3
    pad: int = 0
    name: str = "custom"
    state: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.max_step >= self.cell_size:
            raise ContractViolation("max_step must be smaller than one cell")
        if self.pad < 0:
            raise ContractViolation("pad must be >= 0")
        if self.state is None:
            r, c = free_cells(self.grid)[0]
            self.state = np.array([c + 0.5, r + 0.5], dtype=np.float64)

    @property
    def obs_dim(self) -> int:
        return 2 + self.pad

    @property
    def act_dim(self) -> int:
        return 2

    def cell_of(self, pos) -> tuple[int, int]:
        return int(pos[1]), int(pos[0])

    def is_free(self, pos) -> bool:
        r, c = self.cell_of(pos)
        return (0 <= r < self.grid.shape[0] and 0 <= c < self.grid.shape[1]
                and not self.grid[r, c])

    def reset(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64)
        if not self.is_free(pos):
            raise ContractViolation(f"reset position {pos} is inside a wall")
        self.state = pos.copy()
        return self.observe()

    def observe(self, pos=None) -> np.ndarray:
        p = self.state if pos is None else np.asarray(pos)
        obs = np.zeros(self.obs_dim, dtype=np.float32)
        obs[:2] = p
        return obs

    def step(self, action) -> np.ndarray:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        a = np.nan_to_num(a, nan=0.0) * self.max_step
        x, y = self.state
        row = int(y)
        nx = x + a[0]
        c_from, c_to = int(x), int(nx)
        if c_to != c_from:
            if self.grid[row, c_to]:
                if c_to > c_from:
                    nx = c_to - self.margin
                else:
                    nx = c_from + self.margin
        col = int(nx)
        ny = y + a[1]
        r_to = int(ny)
        if r_to != row:
            if self.grid[r_to, col]:
                if r_to > row:
                    ny = r_to - self.margin
                else:
                    ny = row + self.margin
        self.state = np.array([nx, ny], dtype=np.float64)
        return self.observe()

    def at_goal(self, goal_pos, pos=None) -> bool:
        p = self.state if pos is None else np.asarray(pos, dtype=np.float64)
        g = np.asarray(goal_pos, dtype=np.float64)[:2]
        return bool(np.linalg.norm(p[:2] - g) <= self.goal_radius)


def make_env(name: str, pad: int = 0, goal_radius: float = 0.5) -> MazeEnv:
    if name not in LAYOUTS:
        raise ContractViolation(
            f"unknown env '{name}', have {sorted(LAYOUTS)}"
        )
    return MazeEnv(grid=_parse(LAYOUTS[name]), pad=pad,
                   goal_radius=goal_radius, name=name)
