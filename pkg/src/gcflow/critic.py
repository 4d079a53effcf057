"""Goal-conditioned expectile value critic over encoded goals.

The critic scores V(s, phi(s, g)) where phi is the shared goal encoder.
Bootstrap targets come from Polyak-averaged copies of both the value net
and the encoder, evaluated gradient-free. A sample is terminal when its
goal is already reached (position within the goal radius, which includes
every goal-source=current sample); terminal samples take the raw reward
with no bootstrap.

Rewards are the indicator of goal attainment, so values learned with
discount gamma land in [0, 1] and behave like discounted reachability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, NumericFault, Tensor
from .data import GoalBatch, SOURCE_CURRENT
from .encoder import GoalEncoder, encode, encode_np
from .nn import MlpSpec, ParamSet, init_mlp, mlp_eval, mlp_forward

__all__ = [
    "CriticBundle",
    "AdvantagePair",
    "make_critic",
    "expectile_penalty",
    "expectile_loss",
    "reward_and_mask",
    "value_loss",
    "advantages",
]


@dataclass
class CriticBundle:
    v_params: ParamSet
    v_spec: MlpSpec
    v_target: ParamSet
    encoder: GoalEncoder
    encoder_target: GoalEncoder
    kappa: float
    gamma: float
    goal_radius: float = 0.5

    def __post_init__(self):
        if not (0.5 <= self.kappa < 1.0):
            raise ContractViolation(f"kappa={self.kappa} outside [0.5, 1)")
        if not (0.0 < self.gamma < 1.0):
            raise ContractViolation(f"gamma={self.gamma} outside (0, 1)")
        if self.v_target.names() != self.v_params.names():
            raise ContractViolation("V and its target must share structure")
        if self.goal_radius <= 0:
            raise ContractViolation("goal_radius must be positive")


def make_critic(encoder: GoalEncoder, hidden: list[int], activation: str,
                kappa: float, gamma: float, seed: int,
                goal_radius: float = 0.5) -> CriticBundle:
    spec = MlpSpec(encoder.obs_dim + encoder.rep_dim, list(hidden), 1,
                   activation=activation)
    v_params = init_mlp(spec, seed)
    enc_target = GoalEncoder(encoder.params.clone(), encoder.spec,
                             encoder.obs_dim, encoder.rep_dim)
    return CriticBundle(v_params=v_params, v_spec=spec,
                        v_target=v_params.clone(), encoder=encoder,
                        encoder_target=enc_target, kappa=kappa, gamma=gamma,
                        goal_radius=goal_radius)


def expectile_penalty(residual: Tensor, kappa: float) -> Tensor:
    """Mean of |kappa - 1{x<0}| x^2; extended domain, any kappa in (0,1)."""
    if not (0.0 < kappa < 1.0):
        raise ContractViolation(f"kappa={kappa} outside (0, 1)")
    w = np.where(residual.values < 0, 1.0 - kappa, kappa).astype(np.float32)
    return ad.reduce_mean(ad.multiply(ad.square(residual), Tensor(w)))


def expectile_loss(residual: Tensor, kappa: float) -> Tensor:
    if not (0.5 <= kappa < 1.0):
        raise ContractViolation(f"kappa={kappa} outside [0.5, 1)")
    return expectile_penalty(residual, kappa)


def reward_and_mask(batch: GoalBatch,
                    goal_radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Indicator reward on the position coordinates and its bootstrap mask.

    The ball test runs on the transition's endpoint: r = 1 when s_{h+1}
    lands within goal_radius of the goal, and that terminal transition
    does not bootstrap (mask = 1 - r), which keeps V bounded under the
    indicator reward. Goal-source=current samples are terminal as well.
    """
    dist = np.linalg.norm(batch.s_next[:, :2] - batch.g[:, :2], axis=1)
    reached = (dist <= goal_radius) | (batch.source == SOURCE_CURRENT)
    r = reached.astype(np.float32)
    return r, np.float32(1.0) - r


def value_loss(bundle: CriticBundle, batch: GoalBatch) -> Tensor:
    """Expectile-weighted TD loss; gradient reaches V and the encoder."""
    phi_next = encode_np(bundle.encoder_target, batch.s_next, batch.g)
    v_next = mlp_eval(bundle.v_target, bundle.v_spec,
                      np.concatenate([batch.s_next, phi_next], axis=1))[:, 0]
    r, mask = reward_and_mask(batch, bundle.goal_radius)
    target = r + mask * np.float32(bundle.gamma) * v_next

    phi = encode(bundle.encoder, Tensor(batch.s_h), Tensor(batch.g))
    v = mlp_forward(bundle.v_params, bundle.v_spec,
                    ad.concat([Tensor(batch.s_h), phi]))
    residual = ad.subtract(Tensor(target[:, None]), v)
    return expectile_loss(residual, bundle.kappa)


@dataclass
class AdvantagePair:
    high: np.ndarray  # (B,)
    low: np.ndarray   # (B,)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.high)) and np.all(np.isfinite(self.low))):
            raise NumericFault("non-finite advantage")


def _v_np(bundle: CriticBundle, s: np.ndarray, goal: np.ndarray) -> np.ndarray:
    phi = encode_np(bundle.encoder, s, goal)
    return mlp_eval(bundle.v_params, bundle.v_spec,
                    np.concatenate([s, phi], axis=1))[:, 0]


def advantages(bundle: CriticBundle, batch: GoalBatch) -> AdvantagePair:
    """High: value gain of the k-step state toward g. Low: value gain of
    the next state toward the k-step subgoal. Gradient-free."""
    high = (_v_np(bundle, batch.s_sub, batch.g)
            - _v_np(bundle, batch.s_h, batch.g))
    low = (_v_np(bundle, batch.s_next, batch.s_sub)
           - _v_np(bundle, batch.s_h, batch.s_sub))
    return AdvantagePair(high=high, low=low)
