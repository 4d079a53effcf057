"""Conditional generators for both hierarchy levels.

The workhorse is the average-velocity ("mean flow") network
u(x^t, r, t, cond): trained so that a single evaluation at (r=0, t=1)
transports Gaussian noise to the target distribution in one step. Targets
come from the average-velocity identity u = v - (t-r) du/dt, whose du/dt
term is one forward-mode directional derivative along (v, 0, 1, 0), taken
with gradients stopped.

Also here: the instantaneous-field flow-matching loss and Euler sampler
(multi-step baseline and numerical oracle), and Gaussian mean/log-std
policy heads with advantage-weighted regression for the unimodal baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, NumericFault, Tensor
from .nn import MlpSpec, ParamSet, init_mlp, mlp_eval, mlp_forward

__all__ = [
    "MeanFlowPolicy",
    "TimePair",
    "AwrConfig",
    "make_mf_policy",
    "mf_forward",
    "mf_eval",
    "sample_timepair",
    "sample_timepairs",
    "meanflow_target",
    "meanflow_target_fn",
    "weighted_mf_loss",
    "one_step_sample",
    "fm_loss",
    "euler_integrate",
    "ode_sample",
    "GaussianPolicy",
    "make_gaussian_policy",
    "gaussian_nll_rows",
    "gaussian_awr_loss",
    "gaussian_mean",
    "awr_weights",
]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class TimePair:
    r: float
    t: float

    def __post_init__(self):
        if not (0.0 <= self.r <= self.t <= 1.0):
            raise ContractViolation(f"need 0 <= r <= t <= 1, got ({self.r}, {self.t})")


@dataclass
class AwrConfig:
    beta: float = 3.0
    clip: float = 100.0

    def __post_init__(self):
        if self.beta < 0:
            raise ContractViolation("beta must be >= 0")
        if self.clip < 1:
            raise ContractViolation("weight clip must be >= 1")


@dataclass
class MeanFlowPolicy:
    """Average-velocity net; input [x, r, t, cond], output dim(x)."""

    params: ParamSet
    spec: MlpSpec
    level: str
    noise_dim: int
    cond_dim: int
    forward_calls: int = 0


def make_mf_policy(level: str, noise_dim: int, cond_dim: int,
                   hidden: list[int], activation: str,
                   seed: int) -> MeanFlowPolicy:
    if level not in ("high", "low"):
        raise ContractViolation(f"level must be high or low, got '{level}'")
    spec = MlpSpec(noise_dim + 2 + cond_dim, list(hidden), noise_dim,
                   activation=activation)
    return MeanFlowPolicy(init_mlp(spec, seed), spec, level, noise_dim,
                          cond_dim)


def mf_forward(policy: MeanFlowPolicy, x: Tensor, r: Tensor, t: Tensor,
               cond: Tensor) -> Tensor:
    """Taped/tangent-aware pass; r and t are [B,1] scalar features."""
    policy.forward_calls += 1
    return mlp_forward(policy.params, policy.spec,
                       ad.concat([x, r, t, cond]))


def mf_eval(policy: MeanFlowPolicy, x: np.ndarray, r: np.ndarray,
            t: np.ndarray, cond: np.ndarray) -> np.ndarray:
    policy.forward_calls += 1
    z = np.concatenate([x, r, t, cond], axis=1, dtype=np.float32)
    return mlp_eval(policy.params, policy.spec, z)


def sample_timepairs(rng: np.random.Generator, rho_equal: float,
                     n: int) -> tuple[np.ndarray, np.ndarray]:
    """n pairs; a rho_equal fraction sit on the r=t diagonal, the rest are
    sorted uniform pairs with r < t. All three streams are always drawn."""
    if not (0.0 <= rho_equal <= 1.0):
        raise ContractViolation("rho_equal must lie in [0, 1]")
    eq = rng.random(n) < rho_equal
    u1 = rng.random(n)
    u2 = rng.random(n)
    r = np.where(eq, u1, np.minimum(u1, u2)).astype(np.float32)
    t = np.where(eq, u1, np.maximum(u1, u2)).astype(np.float32)
    return r, t


def sample_timepair(rng: np.random.Generator, rho_equal: float) -> TimePair:
    r, t = sample_timepairs(rng, rho_equal, 1)
    return TimePair(float(r[0]), float(t[0]))


def _interp(x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> np.ndarray:
    tc = t[:, None]
    return (tc * x1 + (np.float32(1.0) - tc) * x0).astype(np.float32)


def meanflow_target_fn(forward_fn, x0: np.ndarray, x1: np.ndarray,
                       r: np.ndarray, t: np.ndarray,
                       cond: np.ndarray) -> np.ndarray:
    """Average-velocity regression target, detached.

    forward_fn(x, r, t, cond) -> Tensor maps dual-number inputs through the
    field. Returns v - (t-r) * du/dt where du/dt is the directional
    derivative along (v, 0, 1, 0); rows with r = t return v exactly.
    """
    x0 = np.asarray(x0, np.float32)
    x1 = np.asarray(x1, np.float32)
    v = x1 - x0
    x_t = _interp(x0, x1, t)
    rc = r[:, None].astype(np.float32)
    tc = t[:, None].astype(np.float32)
    with ad.pause_recording():
        out = forward_fn(
            Tensor(x_t, tangent=v),
            Tensor(rc, tangent=np.zeros_like(rc)),
            Tensor(tc, tangent=np.ones_like(tc)),
            Tensor(np.asarray(cond, np.float32)),
        )
    du_dt = out.tangent
    if du_dt is None:
        du_dt = np.zeros_like(v)
    raw = v - (tc - rc) * du_dt
    return np.where(tc == rc, v, raw).astype(np.float32)


def meanflow_target(policy: MeanFlowPolicy, x0, x1, r, t, cond) -> np.ndarray:
    return meanflow_target_fn(
        lambda *args: mf_forward(policy, *args), x0, x1, r, t, cond)


def awr_weights(adv: np.ndarray, awr: AwrConfig) -> np.ndarray:
    """min(exp(beta * adv), clip), overflow-free via log-space clamping."""
    bad = ~np.isfinite(adv)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericFault(f"non-finite advantage {adv[i]!r} at index {i}")
    capped = np.minimum(np.float64(awr.beta) * adv, math.log(awr.clip))
    return np.exp(capped).astype(np.float32)


def weighted_mf_loss(policy: MeanFlowPolicy, x0: np.ndarray, x1: np.ndarray,
                     r: np.ndarray, t: np.ndarray, cond: np.ndarray,
                     adv: np.ndarray, awr: AwrConfig) -> tuple[Tensor, float]:
    """Advantage-weighted mean-flow regression; gradient reaches only the
    policy (all other inputs enter as plain arrays). Returns (loss, mean
    weight) with weights min(exp(beta*adv), clip)."""
    w = awr_weights(adv, awr)
    target = meanflow_target(policy, x0, x1, r, t, cond)
    x_t = _interp(np.asarray(x0, np.float32), np.asarray(x1, np.float32), t)
    u = mf_forward(policy, Tensor(x_t), Tensor(r[:, None]),
                   Tensor(t[:, None]), Tensor(np.asarray(cond, np.float32)))
    rows = ad.reduce_sum(ad.square(ad.subtract(u, Tensor(target))), axis=-1)
    loss = ad.reduce_mean(ad.multiply(rows, Tensor(w)))
    return loss, float(w.mean())


def one_step_sample(policy: MeanFlowPolicy, cond: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """x0 = x1 - u(x1, 0, 1, cond) from one noise draw and one evaluation;
    low-level outputs are clamped to the action box."""
    cond = np.asarray(cond, np.float32)
    n = cond.shape[0]
    x1 = rng.standard_normal((n, policy.noise_dim)).astype(np.float32)
    zeros = np.zeros((n, 1), np.float32)
    ones = np.ones((n, 1), np.float32)
    out = x1 - mf_eval(policy, x1, zeros, ones, cond)
    if policy.level == "low":
        out = np.clip(out, -1.0, 1.0)
    return out


def fm_loss(policy: MeanFlowPolicy, x0: np.ndarray, x1: np.ndarray,
            t: np.ndarray, cond: np.ndarray,
            weights: np.ndarray | None = None) -> Tensor:
    """Instantaneous-field regression: the same network queried on the r=t
    diagonal regresses x1 - x0 at interpolated points."""
    x0 = np.asarray(x0, np.float32)
    x1 = np.asarray(x1, np.float32)
    x_t = _interp(x0, x1, t)
    tc = t[:, None].astype(np.float32)
    u = mf_forward(policy, Tensor(x_t), Tensor(tc), Tensor(tc),
                   Tensor(np.asarray(cond, np.float32)))
    rows = ad.reduce_sum(ad.square(ad.subtract(u, Tensor(x1 - x0))), axis=-1)
    if weights is not None:
        rows = ad.multiply(rows, Tensor(np.asarray(weights, np.float32)))
    return ad.reduce_mean(rows)


def euler_integrate(field, x1: np.ndarray, steps: int) -> np.ndarray:
    """Euler ODE solve from t=1 to 0: x <- x - (1/steps) field(x, t_i)."""
    if steps < 1:
        raise ContractViolation("steps must be >= 1")
    x = np.asarray(x1, np.float32).copy()
    dt = np.float32(1.0 / steps)
    for i in range(steps):
        t_i = np.float32(1.0 - i / steps)
        x = x - dt * field(x, t_i)
    return x


def ode_sample(policy: MeanFlowPolicy, cond: np.ndarray, steps: int,
               rng: np.random.Generator) -> np.ndarray:
    """Multi-step sampler treating the net on the r=t diagonal as an
    instantaneous field."""
    cond = np.asarray(cond, np.float32)
    n = cond.shape[0]
    x1 = rng.standard_normal((n, policy.noise_dim)).astype(np.float32)

    def field(x, t_scalar):
        tc = np.full((n, 1), t_scalar, np.float32)
        return mf_eval(policy, x, tc, tc, cond)

    out = euler_integrate(field, x1, steps)
    if policy.level == "low":
        out = np.clip(out, -1.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Gaussian baselines

@dataclass
class GaussianPolicy:
    """Mean + log-std head; low level squashes the mean with tanh."""

    params: ParamSet
    spec: MlpSpec
    level: str
    out_dim: int
    cond_dim: int
    forward_calls: int = 0


def make_gaussian_policy(level: str, out_dim: int, cond_dim: int,
                         hidden: list[int], activation: str,
                         seed: int) -> GaussianPolicy:
    if level not in ("high", "low"):
        raise ContractViolation(f"level must be high or low, got '{level}'")
    spec = MlpSpec(cond_dim, list(hidden), 2 * out_dim, activation=activation)
    return GaussianPolicy(init_mlp(spec, seed), spec, level, out_dim, cond_dim)


def _gaussian_head(policy: GaussianPolicy, cond: Tensor) -> tuple[Tensor, Tensor]:
    policy.forward_calls += 1
    out = mlp_forward(policy.params, policy.spec, cond)
    d = policy.out_dim
    mean = ad.slice_last(out, 0, d)
    if policy.level == "low":
        mean = ad.tanh(mean)
    log_std = ad.clip(ad.slice_last(out, d, 2 * d), LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def gaussian_nll_rows(policy: GaussianPolicy, target: np.ndarray,
                      cond: np.ndarray) -> Tensor:
    """Per-sample negative log density of target under the head."""
    mean, log_std = _gaussian_head(policy, Tensor(np.asarray(cond, np.float32)))
    diff = ad.subtract(Tensor(np.asarray(target, np.float32)), mean)
    z = ad.multiply(diff, ad.exp(ad.scalar_scale(log_std, -1.0)))
    d = policy.out_dim
    return ad.add(
        ad.add(ad.scalar_scale(ad.reduce_sum(ad.square(z), axis=-1), 0.5),
               ad.reduce_sum(log_std, axis=-1)),
        Tensor(np.float32(0.5 * d * math.log(2.0 * math.pi))),
    )


def gaussian_awr_loss(policy: GaussianPolicy, target: np.ndarray,
                      cond: np.ndarray, adv: np.ndarray,
                      awr: AwrConfig) -> tuple[Tensor, float]:
    w = awr_weights(adv, awr)
    rows = gaussian_nll_rows(policy, target, cond)
    loss = ad.reduce_mean(ad.multiply(rows, Tensor(w)))
    return loss, float(w.mean())


def gaussian_mean(policy: GaussianPolicy, cond: np.ndarray) -> np.ndarray:
    """Deterministic head output used at evaluation time."""
    policy.forward_calls += 1
    out = mlp_eval(policy.params, policy.spec, np.asarray(cond, np.float32))
    mean = out[:, :policy.out_dim]
    if policy.level == "low":
        mean = np.tanh(mean)
    return mean
