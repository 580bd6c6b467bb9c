import math

import numpy as np
import pytest
from scipy import stats

from onis import autodiff as ad
from onis.autodiff import Tensor
from onis.dynamics import (PAIR_DIM, DynamicsModel, DynamicsModelConfig, build_windows, canonical_sampler,
                           codebook_usage, contrastive_from_embeddings, dynamics_contrastive_loss, encode_dynamics,
                           max_entropy, quantize, reconstruction_from_codes, reconstruction_loss,
                           sample_positive_pair, trajectory_window, usage_entropy, window_index,
                           write_codebook_usage)
from onis.world import STATE_DIM


def _scalar_contrastive(h, include_positive=True, alpha=1.0):
    n = len(h)
    u = [v / np.linalg.norm(v) for v in h]
    s = lambda i, j: math.exp(float(u[i] @ u[j])) / alpha
    denom = sum(s(i, j) for i in range(n) for j in range(n) if i != j
                and (include_positive or {i, j} != {0, 1}))
    return -math.log(s(0, 1) / denom)


def _walk(rng, n):
    """States whose positions move by at most one step per tick, like real rollouts."""
    states = rng.uniform(-1, 1, size=(n, STATE_DIM))
    states[:, :2] = rng.uniform(-1, 1, size=2) + np.cumsum(rng.uniform(-0.06, 0.06, size=(n, 2)), axis=0)
    return states, rng.uniform(-1, 1, size=(n, 2))


def _windows(rng, n):
    out = []
    for _ in range(n):
        s, a = _walk(rng, 3)
        out.append(np.concatenate([s, a], axis=1).ravel())
    return np.array(out)


@pytest.fixture
def model():
    return DynamicsModel(DynamicsModelConfig(enc_hidden=16, dec_hidden=16, enc_layers=2, dec_layers=2),
                         np.random.default_rng(0))


def test_quantize_toy_and_tie():
    cb = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert quantize(cb, [0.2, 0.1])[1] == 0
    assert quantize(cb, [0.5, 0.5])[1] == 0
    row, idx = quantize(cb, [0.9, 0.7])
    assert idx == 1 and np.array_equal(row, cb[1])


def test_quantize_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    cb = rng.standard_normal((16, 10))
    for x in rng.standard_normal((1000, 10)):
        d = ((cb - x) ** 2).sum(axis=1)
        assert quantize(cb, x)[1] == int(np.argmin(d))


def test_three_identical_embeddings_give_log6():
    h = Tensor(np.ones((3, 10)))
    assert contrastive_from_embeddings(h).item() == pytest.approx(math.log(6), abs=1e-9)


@pytest.mark.parametrize("include_positive", [True, False])
def test_contrastive_matches_scalar_oracle(include_positive):
    rng = np.random.default_rng(1)
    h = rng.standard_normal((5, 10))
    got = contrastive_from_embeddings(Tensor(h), 1.0, include_positive).item()
    assert got == pytest.approx(_scalar_contrastive(h, include_positive), rel=1e-12)


def test_contrastive_orthogonal_case():
    h = np.zeros((4, 10))
    h[0, 0] = h[1, 0] = 1.0
    h[2, 1] = h[3, 2] = 1.0
    assert contrastive_from_embeddings(Tensor(h)).item() == pytest.approx(_scalar_contrastive(h), abs=1e-12)


def test_contrastive_rejects_tiny_groups():
    with pytest.raises(ValueError):
        contrastive_from_embeddings(Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(10))
def test_dynamics_losses_grad_check(model, seed):
    rng = np.random.default_rng(seed)
    windows = _windows(rng, 8)
    err = ad.grad_check(lambda _: dynamics_contrastive_loss(model, windows, 4), model.params)
    assert err <= 1e-4
    states, actions = _walk(rng, 10)
    err = ad.grad_check(lambda _: reconstruction_loss(model, states, actions, 6), model.params)
    assert err <= 1e-4


def test_contrastive_group_split_is_checked(model):
    with pytest.raises(ValueError):
        dynamics_contrastive_loss(model, np.zeros((7, 3 * PAIR_DIM)), 4)


def test_encode_dynamics_returns_codebook_row_deterministically(model):
    w = np.random.default_rng(2).standard_normal(3 * PAIR_DIM)
    h = encode_dynamics(model, w)
    assert np.array_equal(h, encode_dynamics(model, w))
    assert any(np.array_equal(h, row) for row in model.codebook.data)


def test_straight_through_bypass_on_encoder_output(model):
    rng = np.random.default_rng(3)
    windows = rng.standard_normal((4, 3 * PAIR_DIM))
    w = rng.standard_normal((4, model.config.code_dim))
    h, *_ = model.encode(windows)
    (h * Tensor(w)).sum().backward()
    through_code = {n: model.params[n].grad.copy() for n in model.params.names() if n.startswith("enc.")}
    model.params.zero_grad()
    (model.pre_quant(windows) * Tensor(w)).sum().backward()
    for n, g in through_code.items():
        assert np.array_equal(g, model.params[n].grad)


def test_window_index_clamps():
    assert window_index([0, 1, 5], 3).tolist() == [[0, 0, 0], [0, 0, 0], [2, 3, 4]]


def test_trajectory_window_layout():
    states = np.arange(6 * STATE_DIM, dtype=float).reshape(6, STATE_DIM)
    actions = np.arange(12, dtype=float).reshape(6, 2)
    w = trajectory_window(states, actions, 4).reshape(3, PAIR_DIM)
    assert np.array_equal(w[:, :STATE_DIM], states[1:4])
    assert np.array_equal(w[:, STATE_DIM:], actions[1:4])
    w0 = trajectory_window(states, actions, 0).reshape(3, PAIR_DIM)
    assert np.all(w0[:, STATE_DIM:] == 0) and np.array_equal(w0[0, :STATE_DIM], states[0])


def test_build_windows_empty_rows_zero_actions():
    states, actions = np.ones((4, STATE_DIM)), np.ones((4, 2))
    w = build_windows(states, actions, np.zeros((2, 3), dtype=int), empty=[True, False]).reshape(2, 3, PAIR_DIM)
    assert np.all(w[0, :, STATE_DIM:] == 0) and np.all(w[1, :, STATE_DIM:] == 1)


def test_fixed_pm1_neighbours():
    rng = np.random.default_rng(0)
    for _ in range(50):
        tj, tk = sample_positive_pair(40, "Fixed±1", rng, t_j=10)
        assert tj == 10 and tk in (9, 11)


@pytest.mark.parametrize("strategy", ["Fixed±1", "Fixed±10", "Random±10", "Random±T"])
def test_pair_is_distinct_and_in_range(strategy):
    rng = np.random.default_rng(1)
    for _ in range(500):
        tj, tk = sample_positive_pair(30, strategy, rng)
        assert tj != tk and 1 <= tj <= 29 and 1 <= tk <= 29
        if strategy.endswith("10"):
            assert abs(tj - tk) <= 10


def test_random_t_partner_is_uniform():
    rng = np.random.default_rng(2)
    L, tj = 40, 20
    draws = [sample_positive_pair(L, "Random±T", rng, t_j=tj)[1] for _ in range(10_000)]
    support = [t for t in range(1, L) if t != tj]
    counts = np.array([draws.count(t) for t in support])
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 0.001


def test_sampler_validation():
    assert canonical_sampler("random+-t") == "Random±T"
    with pytest.raises(ValueError):
        canonical_sampler("nearest")
    with pytest.raises(ValueError):
        sample_positive_pair(4, "Random±T", np.random.default_rng(0))


def test_reconstruction_zero_for_exact_decoder(model):
    rng = np.random.default_rng(4)
    n, h0 = 3, 3
    pair_s, pair_next = rng.standard_normal((n, h0, STATE_DIM)), rng.standard_normal((n, h0, STATE_DIM))
    h = Tensor(rng.standard_normal((n, model.config.code_dim)))
    rows = np.repeat(np.arange(n), h0)
    pred = model.decode(pair_s.reshape(-1, STATE_DIM), pair_next.reshape(-1, STATE_DIM),
                        ad.take_rows(h, rows)).data.reshape(n, h0, 2)
    assert reconstruction_from_codes(model, h, pair_s, pred, pair_next).item() == pytest.approx(0.0, abs=1e-20)


def test_reconstruction_matches_scalar_recomputation(model):
    rng = np.random.default_rng(5)
    states, actions = rng.standard_normal((10, STATE_DIM)), rng.standard_normal((10, 2))
    t = 7
    idx = window_index([t], 3)[0]
    h, _ = model.encode_numpy(build_windows(states, actions, idx[None]))
    terms = []
    for i in idx:
        pred = model.decode(states[i:i + 1], states[i + 1:i + 2], Tensor(h)).data[0]
        terms.append(float(((actions[i] - pred) ** 2).sum()))
    assert reconstruction_loss(model, states, actions, t).item() == pytest.approx(np.mean(terms), rel=1e-12)


def test_raw_feature_mode_widths():
    cfg = DynamicsModelConfig(delta_features=False)
    m = DynamicsModel(cfg, np.random.default_rng(0))
    assert m.encoder_width == cfg.h0 * PAIR_DIM
    assert m.decoder_width == 2 * STATE_DIM + cfg.code_dim


def test_usage_diagnostics(tmp_path):
    counts = codebook_usage([0, 0, 1, 3], 4)
    assert counts.tolist() == [2, 1, 0, 1]
    assert usage_entropy(np.ones(8)) == pytest.approx(max_entropy(8))
    assert usage_entropy(np.zeros(3)) == 0.0
    path = tmp_path / "u.csv"
    write_codebook_usage(path, [(0, counts)])
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,code_0,code_1,code_2,code_3,entropy"
    assert lines[1].startswith("0,2,1,0,1,")
