"""Trainer: config validation, step mechanics, determinism, resume."""

import json
import os

import numpy as np
import pytest

import gcflow.autodiff as ad
from gcflow.autodiff import ContractViolation, NumericFault, Tape, backward
from gcflow.critic import value_loss
from gcflow.data import collect, sample_batch
from gcflow.encoder import build_views, lejepa_parts
from gcflow.maze import make_env
from gcflow.training import (
    METRIC_COLUMNS,
    TrainConfig,
    init_train_state,
    load_train_checkpoint,
    save_train_checkpoint,
    train,
    train_step,
)


def tiny_config(**kw):
    base = dict(algorithm="hifql", env="corridor", steps=4, batch_size=32,
                k=5, rep_dim=4, value_hidden=(16, 16), encoder_hidden=(16,),
                policy_hidden=(16, 16), m_projections=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corridor_ds():
    env = make_env("corridor")
    return collect(env, "waypoint-noisy", episodes=10, horizon=30, seed=3)


# ---------------------------------------------------------------------------
# config

def test_config_roundtrip():
    cfg = tiny_config(lam=0.25, goal_mix=(0.3, 0.4, 0.3))
    d = cfg.to_dict()
    assert json.loads(json.dumps(d)) == d
    assert TrainConfig.from_dict(d) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ContractViolation, match="unknown config keys"):
        TrainConfig.from_dict({"algorithm": "hifql", "warmup": 5})


@pytest.mark.parametrize("bad", [
    dict(algorithm="ppo"), dict(kappa=0.4), dict(kappa=1.0),
    dict(gamma=0.0), dict(k=0), dict(goal_mix=(0.5, 0.5, 0.5)),
    dict(lam=-0.1), dict(alpha=1.5), dict(beta=-1.0), dict(awr_clip=0.5),
    dict(rho_equal=2.0), dict(ode_steps=0), dict(high_goal_encoding="onehot"),
    dict(lr_value=0.0), dict(steps=-1), dict(tau=1.5),
])
def test_config_range_checks(bad):
    with pytest.raises(ContractViolation):
        tiny_config(**bad)


def test_config_json_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_config(seed=7).to_dict()))
    assert TrainConfig.from_json_file(str(path)).seed == 7


# ---------------------------------------------------------------------------
# step mechanics

def test_init_deterministic(corridor_ds):
    a = init_train_state(tiny_config(), corridor_ds)
    b = init_train_state(tiny_config(), corridor_ds)
    for (n1, p1), (n2, p2) in zip(a.bundle.v_params, b.bundle.v_params):
        assert n1 == n2 and np.array_equal(p1.values, p2.values)
    for (_, p1), (_, p2) in zip(a.high.params, b.high.params):
        assert np.array_equal(p1.values, p2.values)


def test_train_step_metrics_and_determinism(corridor_ds):
    a = init_train_state(tiny_config(), corridor_ds)
    b = init_train_state(tiny_config(), corridor_ds)
    for i in range(5):
        ma = train_step(a)
        mb = train_step(b)
        assert list(ma) == METRIC_COLUMNS
        assert ma == mb
        assert ma["step"] == i + 1
    for (_, p1), (_, p2) in zip(a.low.params, b.low.params):
        assert np.array_equal(p1.values, p2.values)


def test_targets_move_by_ema(corridor_ds):
    st = init_train_state(tiny_config(tau=0.05), corridor_ds)
    before = {n: p.values.copy() for n, p in st.bundle.v_target}
    train_step(st)
    moved = any(not np.array_equal(before[n], p.values)
                for n, p in st.bundle.v_target)
    assert moved


def test_gcbc_weights_all_one(corridor_ds):
    st = init_train_state(tiny_config(algorithm="gcbc"), corridor_ds)
    m = train_step(st)
    assert m["mean_awr_weight"] == 1.0


def test_all_algorithms_step(corridor_ds):
    for algo in ("hifql", "hiql-gaussian", "gcbc", "fm-multistep"):
        st = init_train_state(tiny_config(algorithm=algo), corridor_ds)
        m = train_step(st)
        assert all(np.isfinite(v) for v in m.values()), algo


def test_encoded_goal_conditioning(corridor_ds):
    st = init_train_state(tiny_config(high_goal_encoding="encoded"),
                          corridor_ds)
    assert st.high.cond_dim == corridor_ds.obs_dim + st.config.rep_dim
    m = train_step(st)
    assert np.isfinite(m["high_mf_loss"])


def test_zero_lam_gradients_match_pure_value_loss(corridor_ds):
    # The regularizer is still evaluated at lam=0 (fixed rng stream), but
    # its contribution is scaled to zero; critic gradients must match a
    # value-only backward pass elementwise.
    st = init_train_state(tiny_config(lam=0.0), corridor_ds)
    batch = sample_batch(corridor_ds, 32, 5, st.config.goal_mix,
                         st.config.gamma, np.random.default_rng(0))
    with Tape():
        loss = value_loss(st.bundle, batch)
        backward(loss)
    pure = {n: p.grad.copy() for n, p in st.bundle.v_params}
    pure_enc = {n: p.grad.copy() for n, p in st.bundle.encoder.params}
    st.bundle.v_params.zero_grads()
    st.bundle.encoder.params.zero_grads()
    for _, p in st.bundle.v_params:
        p.grad = None
    for _, p in st.bundle.encoder.params:
        p.grad = None

    with Tape():
        v = value_loss(st.bundle, batch)
        views = build_views(st.bundle.encoder, batch, st.config.aug_noise,
                            np.random.default_rng(1))
        lj, _, _ = lejepa_parts(views, st.sigcfg, np.random.default_rng(2))
        backward(ad.add(v, ad.scalar_scale(lj, 0.0)))
    for n, p in st.bundle.v_params:
        assert np.array_equal(p.grad, pure[n]), n
    for n, p in st.bundle.encoder.params:
        assert np.array_equal(p.grad, pure_enc[n]), n


def test_gradient_isolation(corridor_ds):
    # The critic tape never touches policy parameters and the policy tapes
    # never touch critic parameters.
    st = init_train_state(tiny_config(), corridor_ds)
    batch = sample_batch(corridor_ds, 32, 5, st.config.goal_mix,
                         st.config.gamma, st.rng)
    with Tape():
        backward(value_loss(st.bundle, batch))
    for _, p in st.high.params:
        assert p.grad is None
    for _, p in st.low.params:
        assert p.grad is None

    from gcflow.encoder import encode_np
    from gcflow.policy import AwrConfig, sample_timepairs, weighted_mf_loss
    z_sub = encode_np(st.bundle.encoder, batch.s_h, batch.s_sub)
    cond = np.concatenate([batch.s_h, batch.g], axis=1)
    x1 = st.rng.standard_normal(z_sub.shape).astype(np.float32)
    r, t = sample_timepairs(st.rng, 0.25, 32)
    for _, p in st.bundle.v_params:
        p.grad = None
    for _, p in st.bundle.encoder.params:
        p.grad = None
    with Tape():
        loss, _ = weighted_mf_loss(st.high, z_sub, x1, r, t, cond,
                                   np.zeros(32), AwrConfig())
        backward(loss)
    for _, p in st.bundle.v_params:
        assert p.grad is None
    for _, p in st.bundle.encoder.params:
        assert p.grad is None


def test_nonfinite_loss_names_step(corridor_ds):
    st = init_train_state(tiny_config(), corridor_ds)
    st.bundle.v_params.get("w0").values[0, 0] = np.nan
    with pytest.raises(NumericFault, match="value loss.*step 1"):
        train_step(st)


# ---------------------------------------------------------------------------
# outer loop

def read_lines(path):
    with open(path) as f:
        return f.read().splitlines()


def ckpt_bytes(out_dir):
    d = os.path.join(out_dir, "checkpoint")
    with open(os.path.join(d, "manifest.json"), "rb") as f:
        manifest = f.read()
    with open(os.path.join(d, "params.bin"), "rb") as f:
        blob = f.read()
    return manifest, blob


def test_zero_steps_writes_valid_outputs(tmp_path, corridor_ds):
    out = str(tmp_path / "run")
    train(tiny_config(steps=0), corridor_ds, out)
    lines = read_lines(os.path.join(out, "metrics.csv"))
    assert lines == [",".join(METRIC_COLUMNS)]
    st = load_train_checkpoint(os.path.join(out, "checkpoint"), corridor_ds)
    assert st.step == 0


def test_csv_rows_equal_steps(tmp_path, corridor_ds):
    out = str(tmp_path / "run")
    train(tiny_config(steps=6), corridor_ds, out)
    lines = read_lines(os.path.join(out, "metrics.csv"))
    assert len(lines) == 7
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert len(cells) == len(METRIC_COLUMNS)
        assert int(cells[0]) == i + 1
        assert all(np.isfinite(float(c)) for c in cells[1:])


def test_split_run_is_bitwise_identical(tmp_path, corridor_ds):
    full = str(tmp_path / "full")
    train(tiny_config(steps=8), corridor_ds, full)

    half = str(tmp_path / "half")
    train(tiny_config(steps=4), corridor_ds, half)
    rest = str(tmp_path / "rest")
    train(tiny_config(steps=8), corridor_ds, rest,
          resume_from=os.path.join(half, "checkpoint"))

    full_rows = read_lines(os.path.join(full, "metrics.csv"))
    split_rows = (read_lines(os.path.join(half, "metrics.csv"))
                  + read_lines(os.path.join(rest, "metrics.csv"))[1:])
    assert full_rows == split_rows
    assert ckpt_bytes(full) == ckpt_bytes(rest)


def test_resume_zero_extra_steps_identical(tmp_path, corridor_ds):
    out = str(tmp_path / "a")
    train(tiny_config(steps=3), corridor_ds, out)
    again = str(tmp_path / "b")
    train(tiny_config(steps=3), corridor_ds, again,
          resume_from=os.path.join(out, "checkpoint"))
    assert ckpt_bytes(out) == ckpt_bytes(again)
    assert read_lines(os.path.join(again, "metrics.csv")) == \
        [",".join(METRIC_COLUMNS)]


def test_resume_rejects_config_drift(tmp_path, corridor_ds):
    out = str(tmp_path / "a")
    train(tiny_config(steps=2), corridor_ds, out)
    with pytest.raises(ContractViolation, match="resume config"):
        train(tiny_config(steps=4, beta=1.0), corridor_ds,
              str(tmp_path / "b"), resume_from=os.path.join(out, "checkpoint"))


def test_checkpoint_roundtrip_preserves_rng(tmp_path, corridor_ds):
    st = init_train_state(tiny_config(), corridor_ds)
    for _ in range(3):
        train_step(st)
    d = str(tmp_path / "ck")
    save_train_checkpoint(st, d)
    st2 = load_train_checkpoint(d, corridor_ds)
    assert st2.step == 3
    m1 = train_step(st)
    m2 = train_step(st2)
    assert m1 == m2


def test_load_rejects_dim_mismatch(tmp_path, corridor_ds):
    st = init_train_state(tiny_config(), corridor_ds)
    d = str(tmp_path / "ck")
    save_train_checkpoint(st, d)
    padded = collect(make_env("corridor", pad=2), "waypoint-noisy",
                     episodes=3, horizon=20, seed=0)
    with pytest.raises(ContractViolation, match="dims"):
        load_train_checkpoint(d, padded)
