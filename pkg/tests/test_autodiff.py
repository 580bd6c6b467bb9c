import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from onis import autodiff as ad
from onis.autodiff import MLP, ParamSet, Tensor


def _params(rng, **shapes):
    return ParamSet({k: rng.standard_normal(v) for k, v in shapes.items()})


@pytest.mark.parametrize("op", [ad.tanh, ad.leaky_relu, ad.sigmoid, ad.exp, ad.softplus])
def test_elementwise_ops_pass_grad_check(op):
    rng = np.random.default_rng(0)
    ps = _params(rng, x=(4, 3))
    assert ad.grad_check(lambda p: op(p["x"]).sum(), ps) < 1e-6


def test_log_sqrt_reciprocal_on_positive_inputs():
    rng = np.random.default_rng(1)
    ps = ParamSet({"x": rng.uniform(0.5, 2.0, size=(3, 3))})
    for op in (ad.log, ad.sqrt, ad.reciprocal):
        assert ad.grad_check(lambda p: op(p["x"]).sum(), ps) < 1e-6


def test_matmul_concat_take_rows_and_broadcast():
    rng = np.random.default_rng(2)
    ps = _params(rng, a=(3, 4), b=(4, 2), c=(1, 2), d=(3, 1))

    def loss(p):
        y = p["a"] @ p["b"] + p["c"]
        y = ad.concat([y, p["d"]])
        y = ad.take_rows(y, np.array([0, 2, 2]))
        return (y * y).mean() + ad.row_norm(y).sum()

    assert ad.grad_check(loss, ps) < 1e-6


def test_sim_matrix_is_exp_cosine_over_alpha():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((2, 5))
    S = ad.sim_matrix(Tensor(a), Tensor(b), alpha=2.0).data
    for i in range(3):
        for j in range(2):
            cos = a[i] @ b[j] / np.linalg.norm(a[i]) / np.linalg.norm(b[j])
            assert S[i, j] == pytest.approx(np.exp(cos) / 2.0, rel=1e-12)


def test_softplus_is_stable_for_large_inputs():
    y = ad.softplus(Tensor(np.array([[-800.0, 0.0, 800.0]]))).data
    assert np.all(np.isfinite(y))
    assert y[0, 2] == pytest.approx(800.0)
    assert y[0, 1] == pytest.approx(np.log(2.0))


def test_stop_gradient_blocks():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    (ad.stop_gradient(x) * x).sum().backward()
    assert np.allclose(x.grad, 1.0)


def test_straight_through_forward_value_and_identity_backward():
    x = Tensor(np.array([[0.3, -0.2]]), requires_grad=True)
    value = np.array([[1.0, 1.0]])
    y = ad.straight_through(x, value)
    assert np.array_equal(y.data, value)
    w = np.array([[2.0, -3.0]])
    (y * Tensor(w)).sum().backward()
    assert np.array_equal(x.grad, w)


def test_quantize_gradient_equals_gradient_wrt_code():
    rng = np.random.default_rng(4)
    cb = Tensor(rng.standard_normal((5, 3)))
    x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    h, _, idx = ad.quantize(x, cb)
    w = rng.standard_normal((6, 3))
    (h * Tensor(w)).sum().backward()
    assert np.array_equal(x.grad, w)
    assert np.array_equal(h.data, cb.data[idx])


def test_nearest_code_ties_go_to_lowest_index():
    cb = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 0.0]])
    assert ad.nearest_code(cb, np.array([[1.0, 0.0]]))[0] == 0
    assert ad.nearest_code(cb, np.array([[0.0, 0.0]]))[0] == 0


def test_nearest_code_rejects_nonfinite():
    with pytest.raises(ValueError):
        ad.nearest_code(np.zeros((2, 2)), np.array([[np.nan, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (7, 3), elements=st.floats(-5, 5)), arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_nearest_code_matches_brute_force(x, cb):
    idx = ad.nearest_code(cb, x)
    for i, row in enumerate(x):
        d = [float(((row - c) ** 2).sum()) for c in cb]
        assert idx[i] == min(range(len(cb)), key=lambda j: (d[j], j))


def test_vq_aux_loss_gradients_split_between_codebook_and_encoder():
    rng = np.random.default_rng(5)
    ps = _params(rng, z=(4, 3), cb=(3, 3))

    def loss(p):
        _, code, _ = ad.quantize(p["z"], p["cb"])
        return ad.vq_aux_loss(p["z"], code, beta=0.25)

    assert ad.grad_check(loss, ps) < 1e-6
    l = loss(ps)
    ps.zero_grad()
    l.backward()
    z, cb = ps["z"].data, ps["cb"].data
    idx = ad.nearest_code(cb, z)
    assert np.allclose(ps["z"].grad, 0.25 * 2 * (z - cb[idx]) / 4)


def test_tape_replay_freezes_quantizer_decisions():
    cb = Tensor(np.array([[0.0], [1.0]]))
    x = Tensor(np.array([[0.49]]))
    with ad.tape("record") as rec:
        ad.quantize(x, cb)
    with ad.tape("replay", rec):
        _, _, idx = ad.quantize(Tensor(np.array([[0.9]])), cb)
    assert idx[0] == 0


def test_mlp_forward_matches_manual():
    rng = np.random.default_rng(6)
    net = MLP((3, 4, 2), rng)
    x = rng.standard_normal((5, 3))
    p = net.params
    names = sorted(p.names())
    weights = {n: p[n].data for n in names}
    h = x @ weights[[n for n in names if n.endswith("W0")][0]] + weights[[n for n in names if n.endswith("b0")][0]]
    h = np.where(h > 0, h, ad.LEAKY_SLOPE * h)
    y = h @ weights[[n for n in names if n.endswith("W1")][0]] + weights[[n for n in names if n.endswith("b1")][0]]
    assert np.allclose(net.numpy(x), y)


def test_mlp_grad_check():
    rng = np.random.default_rng(7)
    net = MLP((3, 5, 5, 2), rng)
    x = rng.standard_normal((6, 3))
    assert ad.grad_check(lambda p: (net(Tensor(x)) * net(Tensor(x))).mean(), net.params) < 1e-5


def test_sgd_step_updates_and_zeroes():
    ps = ParamSet({"w": np.ones((2, 2))})
    (ps["w"] * ps["w"]).sum().backward()
    ad.sgd_step(ps, 0.1)
    assert np.allclose(ps["w"].data, 0.8)
    assert ps["w"].grad is None


def test_sgd_step_lr_zero_is_identity_and_negative_lr_fails():
    ps = ParamSet({"w": np.ones((2, 2))})
    (ps["w"] * 3.0).sum().backward()
    ad.sgd_step(ps, 0.0)
    assert np.array_equal(ps["w"].data, np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.sgd_step(ps, -1.0)


def test_sgd_step_names_parameter_with_nonfinite_gradient():
    ps = ParamSet({"good": np.ones((1, 1)), "bad": np.ones((1, 1))})
    ps["bad"].grad = np.array([[np.inf]])
    with pytest.raises(FloatingPointError, match="bad"):
        ad.sgd_step(ps, 0.1)


def test_clip_grad_norm():
    ps = ParamSet({"w": np.zeros((1, 2))})
    ps["w"].grad = np.array([[3.0, 4.0]])
    assert ad.clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
    assert np.allclose(ps["w"].grad, [[0.6, 0.8]])


def test_grad_check_detects_a_wrong_gradient():
    ps = ParamSet({"x": np.array([[1.0, 2.0]])})

    def bad(p):
        x = p["x"]
        return ad._node(x.data ** 2, (x,), lambda g: (g,)).sum()  # value x^2, gradient 1

    assert ad.grad_check(bad, ps) > 0.1


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.grad_check(lambda p: p["x"].sum(), ParamSet({"x": np.ones((1, 1))}), eps=1.0)


def test_paramset_roundtrip_and_checksum(tmp_path):
    rng = np.random.default_rng(8)
    ps = _params(rng, a=(2, 3), b=(1, 3))
    path = tmp_path / "p.json"
    ps.save(path)
    back = ParamSet.load(path)
    assert back.checksum() == ps.checksum()
    assert json.loads(path.read_text())["format"] == "onis-params-v1"
    for n in ps.names():
        assert np.array_equal(back[n].data, ps[n].data)


def test_paramset_rejects_wrong_format():
    with pytest.raises(ValueError, match="format"):
        ParamSet.from_dict({"format": "other", "params": {}})


def test_merged_view_shares_tensors():
    a = ParamSet({"w": np.zeros((1, 1))})
    b = ParamSet({"w": np.ones((1, 1))})
    m = a.merged(b, prefixes=["a/", "b/"])
    m["b/w"].data += 1.0
    assert b["w"].data[0, 0] == 2.0
    assert sorted(m.names()) == ["a/w", "b/w"]
