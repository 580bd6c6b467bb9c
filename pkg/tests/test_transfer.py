from dataclasses import replace

import numpy as np
import pytest

from onis import autodiff as ad
from onis.dynamics import DynamicsModel, DynamicsModelConfig
from onis.transfer import (ABLATION_ARMS, LOG_FIELDS, TransferConfig, TransferData, TransferPolicy, ablation_config,
                           bc_loss, policy_action, train_skill_transfer)
from onis.world import STATE_DIM

SMALL = TransferConfig(steps=3, batch=16, groups=2, group_size=4, hidden=16, layers=2, early_stop=False,
                       log_every=1, dynamics=DynamicsModelConfig(enc_hidden=16, dec_hidden=16))


@pytest.fixture(scope="module")
def data(small_dataset, encoders, prompt):
    table = encoders.encode_instructions(prompt.vector, range(4))
    trajs = small_dataset.trajectories[::4]
    return TransferData.from_trajectories(trajs, [t.stages for t in trajs], table)


def _snapshot(ps):
    return {n: ps[n].data.copy() for n in ps.names()}


def _changed(before, ps):
    return {n for n in ps.names() if not np.array_equal(before[n], ps[n].data)}


def _fresh(cfg, seed=0):
    rng = np.random.default_rng(seed)
    model = DynamicsModel(replace(cfg.dynamics, use_vq=cfg.use_vq), rng)
    return TransferPolicy(rng, cfg.hidden, cfg.layers, model.config.code_dim), model


def test_zero_weight_policy_outputs_bias():
    p = TransferPolicy(np.random.default_rng(0), hidden=8, layers=2)
    for n in p.params.names():
        p.params[n].data[:] = 0.0
    last_bias = sorted(n for n in p.params.names() if ".b" in n)[-1]
    p.params[last_bias].data[:] = [[0.3, -0.2]]
    a = policy_action(p, np.zeros(STATE_DIM), np.zeros(16), np.zeros(10))
    assert np.allclose(a, [[0.3, -0.2]])


def test_policy_action_clips_and_checks_shapes():
    p = TransferPolicy(np.random.default_rng(0), hidden=8, layers=2)
    for n in p.params.names():
        p.params[n].data[:] = 0.0
    last_bias = sorted(n for n in p.params.names() if ".b" in n)[-1]
    p.params[last_bias].data[:] = [[3.0, -3.0]]
    x = (np.zeros(STATE_DIM), np.zeros(16), np.zeros(10))
    assert np.array_equal(policy_action(p, *x), [[1.0, -1.0]])
    assert np.array_equal(policy_action(p, *x, clip=False), [[3.0, -3.0]])
    with pytest.raises(ValueError):
        policy_action(p, np.zeros(STATE_DIM), np.zeros(15), np.zeros(10))


def test_policy_output_matches_manual_forward():
    rng = np.random.default_rng(1)
    p = TransferPolicy(rng, hidden=8, layers=2)
    s, z, h = rng.standard_normal((3, STATE_DIM)), rng.standard_normal((3, 16)), rng.standard_normal((3, 10))
    x = np.concatenate([s, z, h], axis=1)
    names = sorted(p.params.names())
    for layer in range(3):
        W = p.params[[n for n in names if n.endswith(f"W{layer}")][0]].data
        b = p.params[[n for n in names if n.endswith(f"b{layer}")][0]].data
        x = x @ W + b
        if layer < 2:
            x = np.where(x > 0, x, ad.LEAKY_SLOPE * x)
    assert np.allclose(policy_action(p, s, z, h, clip=False), x)


def test_bc_loss_scalar_oracle_and_zero_case(data):
    policy, model = _fresh(SMALL)
    ep = np.arange(5)
    t = np.full(5, 4)
    windows, *_ = data.windows(ep, t, 3)
    flat = data.offsets[ep] + t
    s, z = data.states[flat], data.skills[flat]
    a = data.actions[flat]
    loss = bc_loss(policy, model, s, a, z, windows).item()
    h, _ = model.encode_numpy(windows)
    pred = policy_action(policy, s, z, h, clip=False)
    assert loss == pytest.approx(np.mean([float(((a[i] - pred[i]) ** 2).sum()) for i in range(5)]))
    assert bc_loss(policy, model, s, pred, z, windows).item() == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("seed", range(10))
def test_bc_loss_grad_check_reaches_policy_and_encoder(data, seed):
    policy, model = _fresh(SMALL, seed)
    rng = np.random.default_rng(seed)
    ep = rng.integers(0, data.n_episodes, 4)
    t = data.sample_times(ep, rng)
    windows, *_ = data.windows(ep, t, 3)
    flat = data.offsets[ep] + t
    both = policy.params.merged(model.params, prefixes=["pi/", "dyn/"])
    names = [n for n in both.names() if n.startswith("pi/") or "/enc." in n]
    err = ad.grad_check(lambda _: bc_loss(policy, model, data.states[flat], data.actions[flat], data.skills[flat],
                                          windows), both, names=names)
    assert err <= 1e-4
    both.zero_grad()
    bc_loss(policy, model, data.states[flat], data.actions[flat], data.skills[flat], windows).backward()
    assert any(np.any(model.params[n].grad) for n in model.params.names() if n.startswith("enc."))


def test_lr_zero_leaves_all_parameters_unchanged(data):
    cfg = replace(SMALL, steps=1, lr_policy=0.0, lr_encoder=0.0, lr_decoder=0.0)
    policy, model = _fresh(cfg)
    before = _snapshot(policy.params), _snapshot(model.params)
    train_skill_transfer(data, cfg, policy=policy, model=model)
    assert not _changed(before[0], policy.params) and not _changed(before[1], model.params)


def test_decoder_untouched_without_reconstruction(data):
    cfg = replace(SMALL, use_reconstruction=False)
    policy, model = _fresh(cfg)
    before = _snapshot(model.params)
    train_skill_transfer(data, cfg, policy=policy, model=model)
    changed = _changed(before, model.params)
    assert not any(n.startswith("dec.") for n in changed)
    assert any(n.startswith("enc.") for n in changed)


def test_policy_untouched_without_bc(data):
    cfg = replace(SMALL, w_bc=0.0)
    policy, model = _fresh(cfg)
    before_pi, before_dyn = _snapshot(policy.params), _snapshot(model.params)
    train_skill_transfer(data, cfg, policy=policy, model=model)
    assert not _changed(before_pi, policy.params)
    assert any(n.startswith("dec.") for n in _changed(before_dyn, model.params))


def test_training_is_reproducible(data):
    a = train_skill_transfer(data, SMALL, seed=3)
    b = train_skill_transfer(data, SMALL, seed=3)
    c = train_skill_transfer(data, SMALL, seed=4)
    assert a.policy.params.checksum() == b.policy.params.checksum()
    assert a.model.params.checksum() == b.model.params.checksum()
    assert a.model.params.checksum() != c.model.params.checksum()


def test_ablation_arms_match_reported_columns():
    assert list(ABLATION_ARMS) == ["w/ Contra, w/ VQ", "w/ Contra, wo/ VQ", "wo/ Contra, w/ VQ",
                                   "wo/ Contra, wo/ VQ", "wo/ Recon"]
    cfg = ablation_config(SMALL, "w/ Contra, wo/ VQ")
    assert cfg.use_contrastive and not cfg.use_vq and not cfg.dynamics.use_vq
    with pytest.raises(ValueError):
        ablation_config(SMALL, "w/ everything")


def test_without_vq_the_encoder_output_is_continuous(data):
    res = train_skill_transfer(data, ablation_config(SMALL, "wo/ Contra, wo/ VQ"))
    windows, *_ = data.windows(np.arange(3), np.full(3, 5), 3)
    h, idx = res.model.encode_numpy(windows)
    assert idx is None
    assert not any(np.array_equal(h[0], row) for row in res.model.codebook.data)
    assert np.isnan(res.log[-1]["codebook_usage_entropy"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_reports_step(data):
    cfg = replace(SMALL, lr_policy=1e6, lr_encoder=1e6, lr_decoder=1e6, steps=50)
    with pytest.raises(FloatingPointError, match="step"):
        train_skill_transfer(data, cfg)


def test_contrastive_needs_two_dynamics(small_dataset, encoders, prompt):
    table = encoders.encode_instructions(prompt.vector, range(4))
    m0 = small_dataset[0].dynamics.m
    trajs = [t for t in small_dataset if t.dynamics.m == m0][:4]
    one_m = TransferData.from_trajectories(trajs, [t.stages for t in trajs], table)
    with pytest.raises(ValueError, match="different dynamics"):
        train_skill_transfer(one_m, SMALL)


def test_log_columns_and_csv(data, tmp_path):
    path = tmp_path / "log.csv"
    res = train_skill_transfer(data, SMALL, log_path=path)
    assert set(res.log[0]) == set(LOG_FIELDS)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(LOG_FIELDS) and len(lines) == 1 + SMALL.steps


def test_early_stop_on_plateau(data):
    cfg = replace(SMALL, steps=400, early_stop=True, plateau_window=10, plateau_tol=10.0)
    assert train_skill_transfer(data, cfg).steps_run == 20


def test_bc_and_reconstruction_losses_halve(data):
    cfg = replace(TransferConfig(), steps=1500, batch=64, groups=4, early_stop=False, log_every=100)
    log = train_skill_transfer(data, cfg).log
    for key in ("loss_bc", "loss_rec"):
        assert log[-1][key] <= 0.5 * log[0][key]
