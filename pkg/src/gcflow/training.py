"""Offline trainer tying the critic, encoder, and both policy levels together.

Each step draws one batch and applies, in order: a critic/encoder update on
the expectile TD loss plus the weighted embedding regularizer, EMA target
refreshes, then advantage-weighted updates of the high-level and low-level
generators. Four algorithm variants share the critic stack and differ only
in the policy heads:

  hifql          one-step average-velocity generators at both levels
  fm-multistep   same network shape trained as an instantaneous field,
                 sampled by Euler integration
  hiql-gaussian  unimodal mean/log-std heads with AWR
  gcbc           hiql-gaussian with beta = 0 (all weights 1)

Runs are resumable: checkpoints carry every parameter, both EMA targets,
Adam moments, the sampler state, and the config, so a split run is bitwise
identical to an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, NumericFault, Tape, backward
from .critic import CriticBundle, advantages, make_critic, value_loss
from .data import Dataset, sample_batch
from .encoder import SigregConfig, build_views, encode_np, lejepa_parts, make_encoder
from .nn import (AdamState, adam_step, ema_update, load_checkpoint,
                 save_checkpoint, standardize_input)
from .policy import (
    AwrConfig,
    GaussianPolicy,
    MeanFlowPolicy,
    awr_weights,
    fm_loss,
    gaussian_awr_loss,
    make_gaussian_policy,
    make_mf_policy,
    sample_timepairs,
    weighted_mf_loss,
)

__all__ = [
    "ALGORITHMS",
    "TrainConfig",
    "TrainState",
    "init_train_state",
    "train_step",
    "train",
    "save_train_checkpoint",
    "load_train_checkpoint",
    "METRIC_COLUMNS",
]

ALGORITHMS = ("hifql", "hiql-gaussian", "gcbc", "fm-multistep")

METRIC_COLUMNS = [
    "step", "value_loss", "lejepa_loss", "sigreg", "pred_loss",
    "high_mf_loss", "low_mf_loss", "mean_abs_adv_high", "mean_abs_adv_low",
    "mean_awr_weight",
]


@dataclass
class TrainConfig:
    algorithm: str = "hifql"
    env: str = "small"
    seed: int = 0
    steps: int = 50_000
    batch_size: int = 256
    # critic
    kappa: float = 0.7
    gamma: float = 0.99
    k: int = 25
    tau: float = 0.005
    goal_radius: float = 0.5
    goal_mix: tuple = (0.2, 0.5, 0.3)
    # goal representation
    rep_dim: int = 10
    lam: float = 0.1
    alpha: float = 0.5
    m_projections: int = 8
    sigreg_sigma: float = 1.0
    aug_noise: float = 0.05
    # policies
    beta: float = 3.0
    awr_clip: float = 100.0
    rho_equal: float = 0.25
    ode_steps: int = 16
    high_goal_encoding: str = "raw"
    subgoal_every: int = 1
    # networks / optimization
    lr_value: float = 3e-4
    lr_encoder: float = 3e-4
    lr_high: float = 3e-4
    lr_low: float = 3e-4
    value_hidden: tuple = (256, 256)
    encoder_hidden: tuple = (128, 128)
    policy_hidden: tuple = (256, 256)
    activation: str = "gelu"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.goal_mix = tuple(float(x) for x in self.goal_mix)
        self.value_hidden = tuple(int(x) for x in self.value_hidden)
        self.encoder_hidden = tuple(int(x) for x in self.encoder_hidden)
        self.policy_hidden = tuple(int(x) for x in self.policy_hidden)
        if self.algorithm not in ALGORITHMS:
            raise ContractViolation(
                f"algorithm '{self.algorithm}' not one of {ALGORITHMS}")
        if self.steps < 0:
            raise ContractViolation("steps must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if not (0.5 <= self.kappa < 1.0):
            raise ContractViolation("kappa must lie in [0.5, 1)")
        if not (0.0 < self.gamma < 1.0):
            raise ContractViolation("gamma must lie in (0, 1)")
        if self.k < 1:
            raise ContractViolation("k must be >= 1")
        if not (0.0 <= self.tau <= 1.0):
            raise ContractViolation("tau must lie in [0, 1]")
        if self.goal_radius <= 0:
            raise ContractViolation("goal_radius must be positive")
        if len(self.goal_mix) != 3 or min(self.goal_mix) < 0 \
                or abs(sum(self.goal_mix) - 1.0) > 1e-6:
            raise ContractViolation("goal_mix must be three probabilities")
        if self.rep_dim < 1:
            raise ContractViolation("rep_dim must be >= 1")
        if self.lam < 0:
            raise ContractViolation("lam must be >= 0")
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractViolation("alpha must lie in [0, 1]")
        if self.aug_noise < 0:
            raise ContractViolation("aug_noise must be >= 0")
        if self.beta < 0:
            raise ContractViolation("beta must be >= 0")
        if self.awr_clip < 1:
            raise ContractViolation("awr_clip must be >= 1")
        if not (0.0 <= self.rho_equal <= 1.0):
            raise ContractViolation("rho_equal must lie in [0, 1]")
        if self.ode_steps < 1:
            raise ContractViolation("ode_steps must be >= 1")
        if self.high_goal_encoding not in ("raw", "encoded"):
            raise ContractViolation("high_goal_encoding must be raw or encoded")
        if self.subgoal_every < 1:
            raise ContractViolation("subgoal_every must be >= 1")
        for name in ("lr_value", "lr_encoder", "lr_high", "lr_low"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.checkpoint_every < 0:
            raise ContractViolation("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("goal_mix", "value_hidden", "encoder_hidden",
                    "policy_hidden"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(
                f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class TrainState:
    config: TrainConfig
    dataset: Dataset
    rng: np.random.Generator
    step: int
    bundle: CriticBundle
    high: MeanFlowPolicy | GaussianPolicy
    low: MeanFlowPolicy | GaussianPolicy
    opt_v: AdamState
    opt_enc: AdamState
    opt_high: AdamState
    opt_low: AdamState
    sigcfg: SigregConfig
    awr: AwrConfig

    @property
    def mean_flow(self) -> bool:
        return self.config.algorithm in ("hifql", "fm-multistep")


def high_cond_dim(cfg: TrainConfig, obs_dim: int) -> int:
    goal_feat = obs_dim if cfg.high_goal_encoding == "raw" else cfg.rep_dim
    return obs_dim + goal_feat


def init_train_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    obs_dim, act_dim = dataset.obs_dim, dataset.act_dim
    enc_seed, v_seed, high_seed, low_seed, rng_seed = (
        int(s) for s in np.random.SeedSequence(config.seed).generate_state(5))

    # Dataset observation statistics, folded into every first layer that
    # consumes raw observations. Maze coordinates are several units wide;
    # without this the encoder initializes far outside the embedding scale
    # the Gaussian-matching regularizer can pull back to. Constant
    # dimensions (zero padding) keep unit scale.
    obs_loc = dataset.states_flat.mean(axis=0).astype(np.float32)
    obs_sd = dataset.states_flat.std(axis=0).astype(np.float32)
    obs_scale = np.where(obs_sd > 1e-3, obs_sd, np.float32(1.0))
    ident = lambda n: (np.zeros(n, np.float32), np.ones(n, np.float32))

    encoder = make_encoder(obs_dim, config.rep_dim,
                           list(config.encoder_hidden), config.activation,
                           enc_seed)
    standardize_input(encoder.params,
                      np.concatenate([obs_loc, obs_loc]),
                      np.concatenate([obs_scale, obs_scale]))
    bundle = make_critic(encoder, list(config.value_hidden),
                         config.activation, config.kappa, config.gamma,
                         v_seed, goal_radius=config.goal_radius)
    rep_loc, rep_one = ident(config.rep_dim)
    for ps in (bundle.v_params, bundle.v_target):
        standardize_input(ps, np.concatenate([obs_loc, rep_loc]),
                          np.concatenate([obs_scale, rep_one]))

    hc = high_cond_dim(config, obs_dim)
    lc = obs_dim + config.rep_dim
    goal_loc, goal_scale = ((obs_loc, obs_scale)
                            if config.high_goal_encoding == "raw"
                            else (rep_loc, rep_one))
    hidden = list(config.policy_hidden)
    if config.algorithm in ("hifql", "fm-multistep"):
        high = make_mf_policy("high", config.rep_dim, hc, hidden,
                              config.activation, high_seed)
        low = make_mf_policy("low", act_dim, lc, hidden,
                             config.activation, low_seed)
        head = ident(config.rep_dim + 2)
        low_head = ident(act_dim + 2)
    else:
        high = make_gaussian_policy("high", config.rep_dim, hc, hidden,
                                    config.activation, high_seed)
        low = make_gaussian_policy("low", act_dim, lc, hidden,
                                   config.activation, low_seed)
        head = ident(0)
        low_head = ident(0)
    standardize_input(high.params,
                      np.concatenate([head[0], obs_loc, goal_loc]),
                      np.concatenate([head[1], obs_scale, goal_scale]))
    standardize_input(low.params,
                      np.concatenate([low_head[0], obs_loc, rep_loc]),
                      np.concatenate([low_head[1], obs_scale, rep_one]))

    beta = 0.0 if config.algorithm == "gcbc" else config.beta
    return TrainState(
        config=config, dataset=dataset,
        rng=np.random.default_rng(rng_seed), step=0, bundle=bundle,
        high=high, low=low,
        opt_v=AdamState(bundle.v_params, config.lr_value),
        opt_enc=AdamState(encoder.params, config.lr_encoder),
        opt_high=AdamState(high.params, config.lr_high),
        opt_low=AdamState(low.params, config.lr_low),
        sigcfg=SigregConfig(m_projections=config.m_projections,
                            sigma=config.sigreg_sigma, alpha=config.alpha,
                            lam=config.lam),
        awr=AwrConfig(beta=beta, clip=config.awr_clip),
    )


def _require_finite(name: str, value: float, step: int) -> None:
    if not np.isfinite(value):
        raise NumericFault(f"{name} is {value!r} at step {step}")


def goal_features(state: TrainState, g: np.ndarray) -> np.ndarray:
    """High-level conditioning features for the goal column."""
    if state.config.high_goal_encoding == "raw":
        return g
    return encode_np(state.bundle.encoder, g, g)


def train_step(state: TrainState) -> dict:
    """One optimization step on a single shared batch. Returns the metric
    row for the new step count."""
    cfg = state.config
    step = state.step + 1
    batch = sample_batch(state.dataset, cfg.batch_size, cfg.k, cfg.goal_mix,
                         cfg.gamma, state.rng)
    bundle = state.bundle
    enc = bundle.encoder

    # critic + encoder: expectile TD plus lam-weighted embedding regularizer
    # (always evaluated so the sampler stream is lam-independent)
    with Tape():
        v_loss = value_loss(bundle, batch)
        views = build_views(enc, batch, cfg.aug_noise, state.rng)
        lj_total, sig_val, pred_val = lejepa_parts(views, state.sigcfg,
                                                   state.rng)
        critic_loss = ad.add(v_loss, ad.scalar_scale(lj_total, cfg.lam))
        _require_finite("value loss", v_loss.item(), step)
        _require_finite("lejepa loss", lj_total.item(), step)
        backward(critic_loss)
    adam_step(state.opt_v, bundle.v_params)
    adam_step(state.opt_enc, enc.params)
    ema_update(bundle.v_target, bundle.v_params, cfg.tau)
    ema_update(bundle.encoder_target.params, enc.params, cfg.tau)

    adv = advantages(bundle, batch)
    z_sub = encode_np(enc, batch.s_h, batch.s_sub)
    cond_high = np.concatenate([batch.s_h, goal_features(state, batch.g)],
                               axis=1)
    cond_low = np.concatenate([batch.s_h, z_sub], axis=1)

    if state.mean_flow:
        x1_h = state.rng.standard_normal(z_sub.shape).astype(np.float32)
        r_h, t_h = sample_timepairs(state.rng, cfg.rho_equal, cfg.batch_size)
        x1_l = state.rng.standard_normal(batch.a_h.shape).astype(np.float32)
        r_l, t_l = sample_timepairs(state.rng, cfg.rho_equal, cfg.batch_size)
        if cfg.algorithm == "hifql":
            with Tape():
                h_loss, mw_h = weighted_mf_loss(
                    state.high, z_sub, x1_h, r_h, t_h, cond_high, adv.high,
                    state.awr)
                _require_finite("high policy loss", h_loss.item(), step)
                backward(h_loss)
            adam_step(state.opt_high, state.high.params)
            with Tape():
                l_loss, mw_l = weighted_mf_loss(
                    state.low, batch.a_h, x1_l, r_l, t_l, cond_low, adv.low,
                    state.awr)
                _require_finite("low policy loss", l_loss.item(), step)
                backward(l_loss)
            adam_step(state.opt_low, state.low.params)
        else:  # fm-multistep trains the same nets on the diagonal only
            w_h = awr_weights(adv.high, state.awr)
            w_l = awr_weights(adv.low, state.awr)
            mw_h, mw_l = float(w_h.mean()), float(w_l.mean())
            with Tape():
                h_loss = fm_loss(state.high, z_sub, x1_h, t_h, cond_high,
                                 weights=w_h)
                _require_finite("high policy loss", h_loss.item(), step)
                backward(h_loss)
            adam_step(state.opt_high, state.high.params)
            with Tape():
                l_loss = fm_loss(state.low, batch.a_h, x1_l, t_l, cond_low,
                                 weights=w_l)
                _require_finite("low policy loss", l_loss.item(), step)
                backward(l_loss)
            adam_step(state.opt_low, state.low.params)
    else:
        with Tape():
            h_loss, mw_h = gaussian_awr_loss(state.high, z_sub, cond_high,
                                             adv.high, state.awr)
            _require_finite("high policy loss", h_loss.item(), step)
            backward(h_loss)
        adam_step(state.opt_high, state.high.params)
        with Tape():
            l_loss, mw_l = gaussian_awr_loss(state.low, batch.a_h, cond_low,
                                             adv.low, state.awr)
            _require_finite("low policy loss", l_loss.item(), step)
            backward(l_loss)
        adam_step(state.opt_low, state.low.params)

    state.step = step
    return {
        "step": step,
        "value_loss": v_loss.item(),
        "lejepa_loss": lj_total.item(),
        "sigreg": sig_val,
        "pred_loss": pred_val,
        "high_mf_loss": h_loss.item(),
        "low_mf_loss": l_loss.item(),
        "mean_abs_adv_high": float(np.abs(adv.high).mean()),
        "mean_abs_adv_low": float(np.abs(adv.low).mean()),
        "mean_awr_weight": 0.5 * (mw_h + mw_l),
    }


# ---------------------------------------------------------------------------
# checkpointing

def _param_groups(state: TrainState) -> dict:
    b = state.bundle
    return {
        "v": b.v_params, "v_target": b.v_target,
        "enc": b.encoder.params, "enc_target": b.encoder_target.params,
        "high": state.high.params, "low": state.low.params,
    }


def _opt_groups(state: TrainState) -> dict:
    return {"v": state.opt_v, "enc": state.opt_enc,
            "high": state.opt_high, "low": state.opt_low}


def save_train_checkpoint(state: TrainState, directory: str) -> None:
    arrays: dict[str, np.ndarray] = {}
    for gname, ps in _param_groups(state).items():
        for n, t in ps:
            arrays[f"{gname}/{n}"] = t.values
    for oname, opt in _opt_groups(state).items():
        for n in sorted(opt.m):
            arrays[f"opt_{oname}/m/{n}"] = opt.m[n]
            arrays[f"opt_{oname}/v/{n}"] = opt.v[n]
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "obs_dim": state.dataset.obs_dim,
        "act_dim": state.dataset.act_dim,
        "rng_state": state.rng.bit_generator.state,
        "adam_steps": {n: o.step_count for n, o in _opt_groups(state).items()},
    }
    save_checkpoint(directory, arrays, meta)


def load_train_checkpoint(directory: str, dataset: Dataset) -> TrainState:
    """Rebuild a TrainState bitwise from disk; the dataset supplies the
    sampling pool and must match the checkpoint's dimensions."""
    arrays, meta = load_checkpoint(directory)
    config = TrainConfig.from_dict(meta["config"])
    if dataset.obs_dim != meta["obs_dim"] or dataset.act_dim != meta["act_dim"]:
        raise ContractViolation(
            f"dataset dims ({dataset.obs_dim}, {dataset.act_dim}) do not "
            f"match checkpoint ({meta['obs_dim']}, {meta['act_dim']})")
    state = init_train_state(config, dataset)
    for gname, ps in _param_groups(state).items():
        ps.load_arrays({n: arrays[f"{gname}/{n}"] for n in ps.names()})
    for oname, opt in _opt_groups(state).items():
        opt.step_count = int(meta["adam_steps"][oname])
        for n in opt.m:
            opt.m[n][...] = arrays[f"opt_{oname}/m/{n}"]
            opt.v[n][...] = arrays[f"opt_{oname}/v/{n}"]
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = int(meta["step"])
    return state


# ---------------------------------------------------------------------------
# the outer loop

def _format_row(row: dict) -> str:
    parts = [str(row["step"])]
    parts += [f"{row[c]:.8e}" for c in METRIC_COLUMNS[1:]]
    return ",".join(parts)


def train(config: TrainConfig, dataset: Dataset, out_dir: str,
          resume_from: str | None = None) -> TrainState:
    """Run until config.steps total steps, streaming one CSV row per step
    to out_dir/metrics.csv and leaving a checkpoint at out_dir/checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        state = load_train_checkpoint(resume_from, dataset)
        a = {k: v for k, v in state.config.to_dict().items() if k != "steps"}
        b = {k: v for k, v in config.to_dict().items() if k != "steps"}
        if a != b:
            raise ContractViolation(
                "resume config differs from checkpoint in more than steps")
        state.config = config
    else:
        state = init_train_state(config, dataset)
    if state.step > config.steps:
        raise ContractViolation(
            f"checkpoint is already at step {state.step} > {config.steps}")

    csv_path = os.path.join(out_dir, "metrics.csv")
    header = ",".join(METRIC_COLUMNS)
    if os.path.exists(csv_path):
        with open(csv_path) as f:
            if f.readline().strip() != header:
                raise ContractViolation(f"{csv_path} has a foreign header")
        f_out = open(csv_path, "a")
    else:
        f_out = open(csv_path, "w")
        f_out.write(header + "\n")
        f_out.flush()
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    try:
        while state.step < config.steps:
            row = train_step(state)
            f_out.write(_format_row(row) + "\n")
            f_out.flush()
            if config.checkpoint_every and \
                    state.step % config.checkpoint_every == 0:
                save_train_checkpoint(state, ckpt_dir)
    finally:
        f_out.close()
    save_train_checkpoint(state, ckpt_dir)
    return state
