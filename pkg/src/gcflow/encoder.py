"""Goal representation encoder with JEPA-style view prediction and
sketched isotropic-Gaussian regularization (SIGReg).

The encoder is an MLP over [s, g]. Four views of each sample share a goal:
the state itself, the k-step-ahead state, and two noise-augmented copies
(state noise, goal noise). The prediction loss pulls views toward their
mean; SIGReg pushes the embedding distribution toward Normal(0, sigma^2 I)
by matching characteristic functions of random 1-D projections against the
Gaussian target under Gauss-Legendre quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .data import GoalBatch
from .nn import MlpSpec, ParamSet, init_mlp, mlp_eval, mlp_forward

__all__ = [
    "GoalEncoder",
    "ViewSet",
    "SigregConfig",
    "make_encoder",
    "encode",
    "encode_np",
    "build_views",
    "pred_loss",
    "sigreg",
    "lejepa_loss",
    "lejepa_parts",
]


@dataclass
class GoalEncoder:
    params: ParamSet
    spec: MlpSpec
    obs_dim: int
    rep_dim: int


def make_encoder(obs_dim: int, rep_dim: int, hidden: list[int],
                 activation: str, seed: int) -> GoalEncoder:
    spec = MlpSpec(2 * obs_dim, list(hidden), rep_dim, activation=activation)
    return GoalEncoder(init_mlp(spec, seed), spec, obs_dim, rep_dim)


def encode(enc: GoalEncoder, s: Tensor, g: Tensor) -> Tensor:
    """phi([s, g]) through the op layer (taped, tangent-aware)."""
    if s.shape[-1] != enc.obs_dim or g.shape[-1] != enc.obs_dim:
        raise ContractViolation(
            f"encode: inputs end in {s.shape[-1]}/{g.shape[-1]}, "
            f"encoder expects {enc.obs_dim}"
        )
    return mlp_forward(enc.params, enc.spec, ad.concat([s, g]))


def encode_np(enc: GoalEncoder, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient-free encode, bitwise equal to encode().values."""
    s = np.asarray(s, np.float32)
    g = np.asarray(g, np.float32)
    return mlp_eval(enc.params, enc.spec, np.concatenate([s, g], axis=-1))


@dataclass
class ViewSet:
    z1: Tensor  # phi(s_h, g)
    z2: Tensor  # phi(s_{h+k}, g)
    z3: Tensor  # phi(s_h + noise, g)
    z4: Tensor  # phi(s_h, g + noise)

    def all(self) -> list[Tensor]:
        return [self.z1, self.z2, self.z3, self.z4]


def build_views(enc: GoalEncoder, batch: GoalBatch, aug_noise: float,
                rng: np.random.Generator) -> ViewSet:
    """Both noise blocks are drawn every call (fixed rng consumption) and
    scaled by aug_noise, so aug_noise=0 reproduces z1 bitwise."""
    eta1 = rng.standard_normal(batch.s_h.shape).astype(np.float32)
    eta2 = rng.standard_normal(batch.g.shape).astype(np.float32)
    scale = np.float32(aug_noise)
    s_h = Tensor(batch.s_h)
    g = Tensor(batch.g)
    z1 = encode(enc, s_h, g)
    z2 = encode(enc, Tensor(batch.s_sub), g)
    z3 = encode(enc, Tensor(batch.s_h + scale * eta1), g)
    z4 = encode(enc, s_h, Tensor(batch.g + scale * eta2))
    return ViewSet(z1, z2, z3, z4)


def pred_loss(views: ViewSet) -> Tensor:
    """Mean over samples and views of ||z_view - mean_view(z)||^2."""
    zs = views.all()
    center = ad.scalar_scale(
        ad.add(ad.add(zs[0], zs[1]), ad.add(zs[2], zs[3])), 0.25)
    rows = None
    for z in zs:
        r = ad.reduce_sum(ad.square(ad.subtract(z, center)), axis=-1)
        rows = r if rows is None else ad.add(rows, r)
    return ad.reduce_mean(ad.scalar_scale(rows, 0.25))


@dataclass
class SigregConfig:
    m_projections: int = 8
    sigma: float = 1.0
    alpha: float = 0.5
    lam: float = 0.1
    n_nodes: int = 33
    omegas: np.ndarray = field(init=False, repr=False)
    quad_weights: np.ndarray = field(init=False, repr=False)
    targets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.m_projections < 1:
            raise ContractViolation("m_projections must be >= 1")
        if self.sigma <= 0:
            raise ContractViolation("sigma must be positive")
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractViolation("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ContractViolation("lam must be >= 0")
        # Gauss-Legendre on [-6 sigma, 6 sigma]; the Gaussian measure decays
        # below 1e-7 outside, so the truncation is negligible
        x, w = np.polynomial.legendre.leggauss(self.n_nodes)
        half = 6.0 * self.sigma
        self.omegas = (half * x).astype(np.float64)
        targets = np.exp(-self.omegas ** 2 / (2.0 * self.sigma ** 2))
        if np.any(half * w <= 0):
            raise ContractViolation("quadrature weights must be positive")
        self.quad_weights = (half * w * targets).astype(np.float64)
        self.targets = targets


def _unit_directions(d: int, m: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((d, m))
    norms = np.linalg.norm(a, axis=0, keepdims=True)
    norms[norms == 0] = 1.0
    return (a / norms).astype(np.float32)


def sigreg(embeds: Tensor, cfg: SigregConfig, rng: np.random.Generator,
           directions: np.ndarray | None = None) -> Tensor:
    """Characteristic-function mismatch statistic of random projections.

    For each of M unit directions a_m, the embeddings project to scalars
    p = Z a_m; the statistic sums quadrature-weighted squared distances
    between the empirical characteristic function of p and the target
    Gaussian's, scaled by N, then averages over directions.
    """
    if embeds.ndim != 2:
        raise ContractViolation("sigreg expects an [N, d] block")
    n, d = embeds.shape
    if n < 2:
        raise ContractViolation("sigreg needs at least 2 embeddings")
    if directions is None:
        directions = _unit_directions(d, cfg.m_projections, rng)
    m = directions.shape[1]
    k = len(cfg.omegas)
    # spread_map[j, j*k + i] = omega_i: one matmul turns [N, M] projections
    # into all M*K phase arguments with exact gradients
    spread = np.zeros((m, m * k), dtype=np.float32)
    for j in range(m):
        spread[j, j * k:(j + 1) * k] = cfg.omegas
    phases = ad.matmul(ad.matmul(embeds, Tensor(directions)), Tensor(spread))
    mean_cos = ad.reduce_mean(ad.cos(phases), axis=0)   # [M*K]
    mean_sin = ad.reduce_mean(ad.sin(phases), axis=0)
    re = ad.subtract(mean_cos, Tensor(np.tile(cfg.targets, m).astype(np.float32)))
    sq = ad.add(ad.square(re), ad.square(mean_sin))
    weighted = ad.multiply(
        sq, Tensor(np.tile(cfg.quad_weights, m).astype(np.float32)))
    return ad.scalar_scale(ad.reduce_sum(weighted), float(n) / m)


def constant_embedding_statistic(cfg: SigregConfig, n: int) -> float:
    """Closed form of the statistic for all-zero embeddings (any M):
    N * integral (1 - target)^2 * target d omega, a pure function of sigma."""
    s = cfg.sigma
    integral = (math.sqrt(2 * math.pi) * s
                - 2 * math.sqrt(math.pi) * s
                + math.sqrt(2 * math.pi / 3) * s)
    return n * integral


def lejepa_parts(views: ViewSet, cfg: SigregConfig,
                 rng: np.random.Generator) -> tuple[Tensor, float, float]:
    """Combined loss plus the two raw component values for logging."""
    sig_sum = None
    for z in views.all():
        s = sigreg(z, cfg, rng)
        sig_sum = s if sig_sum is None else ad.add(sig_sum, s)
    pred = pred_loss(views)
    total = ad.add(ad.scalar_scale(sig_sum, cfg.alpha / 4.0),
                   ad.scalar_scale(pred, 1.0 - cfg.alpha))
    return total, float(sig_sum.values) / 4.0, float(pred.values)


def lejepa_loss(views: ViewSet, cfg: SigregConfig,
                rng: np.random.Generator) -> Tensor:
    total, _, _ = lejepa_parts(views, cfg, rng)
    return total
