"""Deterministic run artifacts: CSV tables and hand-built SVG figures.

Everything here is pure string assembly from explicit inputs, so a report
rendered twice from the same data is byte-identical. Wall-clock timing is
deliberately kept out of these files; the CLI writes it separately.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation
from .maze import MazeEnv

__all__ = [
    "write_csv",
    "read_metrics",
    "learning_curve_svg",
    "maze_rollout_svg",
]

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(str(row[c]) for c in columns) + "\n")


def read_metrics(path: str) -> dict[str, np.ndarray]:
    """Load a metrics CSV into one float64 array per column."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ContractViolation(f"{path} is empty")
    columns = lines[0].split(",")
    data = [[] for _ in columns]
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(columns):
            raise ContractViolation(f"{path}: ragged row '{line}'")
        for slot, cell in zip(data, cells):
            slot.append(float(cell))
    return {c: np.array(d) for c, d in zip(columns, data)}


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _axis_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def learning_curve_svg(steps: np.ndarray, series: dict[str, np.ndarray],
                       title: str = "training metrics") -> str:
    """Line chart of metric columns against step count."""
    if len(steps) == 0 or not series:
        return ('<svg xmlns="http://www.w3.org/2000/svg" width="640" '
                'height="400"><text x="20" y="30">no data</text></svg>')
    w, h = 640, 400
    ml, mr, mt, mb = 60, 150, 40, 45
    pw, ph = w - ml - mr, h - mt - mb
    x_lo, x_hi = float(steps[0]), float(max(steps[-1], steps[0] + 1))
    vals = np.concatenate([np.asarray(v, float) for v in series.values()])
    y_lo, y_hi = float(vals.min()), float(vals.max())
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0

    def sx(x):
        return ml + pw * (x - x_lo) / (x_hi - x_lo)

    def sy(y):
        return mt + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="monospace" font-size="11">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{ml}" y="22" font-size="14">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        'stroke="#333"/>',
    ]
    for tx in _axis_ticks(x_lo, x_hi):
        parts.append(f'<line x1="{sx(tx):.1f}" y1="{mt + ph}" '
                     f'x2="{sx(tx):.1f}" y2="{mt + ph + 4}" stroke="#333"/>')
        parts.append(f'<text x="{sx(tx):.1f}" y="{mt + ph + 16}" '
                     f'text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _axis_ticks(y_lo, y_hi):
        parts.append(f'<line x1="{ml - 4}" y1="{sy(ty):.1f}" x2="{ml}" '
                     f'y2="{sy(ty):.1f}" stroke="#333"/>')
        parts.append(f'<text x="{ml - 8}" y="{sy(ty):.1f}" '
                     f'text-anchor="end" dominant-baseline="middle">'
                     f'{_fmt(ty)}</text>')
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(float(y)):.1f}"
                       for x, y in zip(steps, ys))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 14 + 16 * i
        parts.append(f'<line x1="{ml + pw + 8}" y1="{ly}" '
                     f'x2="{ml + pw + 28}" y2="{ly}" stroke="{color}" '
                     'stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 33}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def maze_rollout_svg(env: MazeEnv, paths: list[np.ndarray],
                     goals: list[tuple[float, float]],
                     title: str = "rollouts") -> str:
    """Top-down maze drawing with rollout traces and goal circles."""
    rows, cols = env.grid.shape
    scale = 48
    w, h = cols * scale, rows * scale + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="monospace" font-size="12">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="6" y="{h - 10}">{title}</text>',
    ]
    for r in range(rows):
        for c in range(cols):
            if env.grid[r, c]:
                parts.append(f'<rect x="{c * scale}" y="{r * scale}" '
                             f'width="{scale}" height="{scale}" '
                             'fill="#444"/>')
    for gx, gy in goals:
        parts.append(f'<circle cx="{gx * scale:.1f}" cy="{gy * scale:.1f}" '
                     f'r="{env.goal_radius * scale:.1f}" fill="none" '
                     'stroke="#2ca02c" stroke-width="2"/>')
    for i, path in enumerate(paths):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{x * scale:.1f},{y * scale:.1f}" for x, y in path)
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5" opacity="0.8"/>')
        if len(path):
            parts.append(f'<circle cx="{path[0][0] * scale:.1f}" '
                         f'cy="{path[0][1] * scale:.1f}" r="4" '
                         f'fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts)
