"""Fast end-to-end sanity checks runnable from the CLI.

Each check exercises one structural invariant with an independently known
answer and reports PASS/FAIL; the suite finishes in a few seconds and is
meant as a smoke test for fresh installs, not a replacement for the test
suite.
"""

from __future__ import annotations

import math
import tempfile

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .critic import expectile_penalty
from .data import collect
from .encoder import SigregConfig, constant_embedding_statistic, sigreg
from .maze import make_env
from .nn import MlpSpec, init_mlp, load_checkpoint, mlp_forward, save_checkpoint
from .policy import make_mf_policy, meanflow_target, one_step_sample, sample_timepairs

__all__ = ["run_selftest", "CHECKS"]


def check_gradient_matches_finite_difference():
    spec = MlpSpec(3, [8], 1, activation="gelu")
    params = init_mlp(spec, seed=0)
    x = np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32)
    with Tape():
        loss = ad.reduce_mean(ad.square(mlp_forward(params, spec, Tensor(x))))
        backward(loss)
    w = params.get("w0")
    eps = 1e-3
    for idx in [(0, 0), (1, 3), (2, 5)]:
        keep = w.values[idx]
        w.values[idx] = keep + eps
        up = ad.reduce_mean(ad.square(mlp_forward(params, spec, Tensor(x)))).item()
        w.values[idx] = keep - eps
        dn = ad.reduce_mean(ad.square(mlp_forward(params, spec, Tensor(x)))).item()
        w.values[idx] = keep
        fd = (up - dn) / (2 * eps)
        if abs(w.grad[idx] - fd) > 1e-3 * max(1.0, abs(fd)):
            return f"grad {w.grad[idx]:.6f} vs fd {fd:.6f} at {idx}"
    return None


def check_expectile_is_half_mse_at_half():
    x = Tensor(np.random.default_rng(0).standard_normal(64).astype(np.float32))
    got = expectile_penalty(x, 0.5).item()
    want = 0.5 * float(np.mean(x.values.astype(np.float64) ** 2))
    if abs(got - want) > 1e-6 * max(1.0, abs(want)):
        return f"{got} != {want}"
    return None


def check_meanflow_boundary():
    pol = make_mf_policy("high", 3, 2, [8], "gelu", seed=2)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((8, 3)).astype(np.float32)
    x1 = rng.standard_normal((8, 3)).astype(np.float32)
    t = rng.random(8).astype(np.float32)
    cond = rng.standard_normal((8, 2)).astype(np.float32)
    tgt = meanflow_target(pol, x0, x1, t, t, cond)
    if not np.array_equal(tgt, x1 - x0):
        return "r=t target is not the velocity"
    return None


def check_sigreg_closed_form():
    cfg = SigregConfig(m_projections=6)
    n = 64
    embeds = Tensor(np.zeros((n, 5), np.float32))
    got = sigreg(embeds, cfg, np.random.default_rng(0)).item()
    want = constant_embedding_statistic(cfg, n)
    if abs(got - want) > 1e-3 * want:
        return f"{got} vs closed form {want}"
    return None


def check_checkpoint_roundtrip():
    arrays = {"a/w": np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32),
              "b": np.float32([1.5, -2.5])}
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(d, arrays, {"step": 7})
        loaded, meta = load_checkpoint(d)
    for k, v in arrays.items():
        if not np.array_equal(loaded[k], v):
            return f"array {k} not bitwise identical"
    if meta["step"] != 7:
        return "meta lost"
    return None


def check_timepair_frequencies():
    r, t = sample_timepairs(np.random.default_rng(0), 0.25, 10_000)
    frac = float(np.mean(r == t))
    if abs(frac - 0.25) > 0.03:
        return f"P(r=t) = {frac}"
    if not np.all(r <= t):
        return "found r > t"
    return None


def check_one_step_noise_passthrough():
    pol = make_mf_policy("high", 2, 1, [4], "relu", seed=0)
    for _, p in pol.params.items:
        p.values[...] = 0.0
    out = one_step_sample(pol, np.zeros((16, 1), np.float32),
                          np.random.default_rng(7))
    want = np.random.default_rng(7).standard_normal((16, 2)).astype(np.float32)
    if not np.array_equal(out, want):
        return "zero net does not pass noise through"
    return None


def check_maze_containment():
    env = make_env("small")
    ds = collect(env, "random-walk", episodes=2, horizon=200, seed=0)
    for tr in ds.trajectories:
        for s in tr.states:
            if not env.is_free(s[:2]):
                return f"state {s[:2]} inside a wall"
    return None


CHECKS = [
    ("gradient-vs-finite-difference", check_gradient_matches_finite_difference),
    ("expectile-half-mse", check_expectile_is_half_mse_at_half),
    ("meanflow-boundary", check_meanflow_boundary),
    ("sigreg-closed-form", check_sigreg_closed_form),
    ("checkpoint-roundtrip", check_checkpoint_roundtrip),
    ("timepair-frequencies", check_timepair_frequencies),
    ("one-step-noise-passthrough", check_one_step_noise_passthrough),
    ("maze-containment", check_maze_containment),
]


def run_selftest(out=print) -> int:
    """Run every check; returns 0 when all pass, 1 otherwise."""
    failures = 0
    for name, fn in CHECKS:
        try:
            detail = fn()
        except Exception as exc:  # a crashed check is a failure, not an abort
            detail = f"{type(exc).__name__}: {exc}"
        if detail is None:
            out(f"PASS {name}")
        else:
            out(f"FAIL {name}: {detail}")
            failures += 1
    return 0 if failures == 0 else 1
