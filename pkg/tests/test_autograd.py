import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goalchoice import autograd as ag
from goalchoice.autograd import Adam, ParamStore, Tensor, adam_step, backward, load_checkpoint, lstm_cell, save_checkpoint
from goalchoice.errors import ContractError, NumericError, SchemaError, ShapeError

from conftest import max_rel_err, numeric_grads


def test_matmul_identity_and_uniform_softmax():
    a = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(ag.matmul(np.eye(4), a).value, a)
    assert np.allclose(ag.softmax(np.full(5, 2.5)).value, 0.2)


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="matmul"):
        ag.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        ag.add(np.ones(3), np.ones(4))


def test_non_finite_guard():
    with pytest.raises(NumericError):
        ag.log(Tensor(np.array([-1.0, 1.0])))
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        ag.exp(Tensor(np.array([1e5])))


def _composite(p, x):
    a = ag.tanh(ag.add(ag.matmul(x, p["w"]), p["b"]))
    s = ag.softmax(ag.mul(a, p["c"]), axis=-1)
    m = ag.max(ag.concat([a, s], axis=-1), axis=-1)
    l = ag.log(ag.add(ag.sum(ag.exp(ag.sigmoid(a)), axis=0), 1.0))
    return ag.add(ag.add(ag.mean(m), ag.sum(ag.square(l))), ag.sum(ag.log_softmax(a[:, 1:], axis=-1)))


def _composite_plain(p, x):
    a = np.tanh(x @ p["w"] + p["b"])
    z = a * p["c"]
    s = np.exp(z - z.max(-1, keepdims=True))
    s = s / s.sum(-1, keepdims=True)
    m = np.concatenate([a, s], -1).max(-1)
    l = np.log(np.exp(1 / (1 + np.exp(-a))).sum(0) + 1.0)
    tail = a[:, 1:]
    lsm = tail - tail.max(-1, keepdims=True) - np.log(np.exp(tail - tail.max(-1, keepdims=True)).sum(-1, keepdims=True))
    return m.mean() + (l ** 2).sum() + lsm.sum()


def _params(rng):
    p = ParamStore()
    p.add("w", rng.normal(size=(3, 4)))
    p.add("b", rng.normal(size=4))
    p.add("c", rng.normal(size=(1, 4)))
    return p


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_composite_matches_plain_evaluator(seed):
    rng = np.random.default_rng(seed)
    p = _params(rng)
    x = rng.normal(size=(5, 3))
    got = _composite(p, x).value
    want = _composite_plain({n: t.value for n, t in p.items()}, x)
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    p = _params(rng)
    x = rng.normal(size=(5, 3))
    backward(_composite(p, x))
    num = numeric_grads(p, lambda: _composite(p, x))
    assert max_rel_err(p.grads(), num) <= 1e-4


def test_quadratic_and_fanout():
    p = ParamStore()
    w = p.add("w", np.array([1.5, -2.0, 0.25]))
    backward(ag.sum(ag.mul(w, w)))
    assert np.array_equal(w.grad, 2 * w.value)
    p.zero_grad()
    backward(ag.sum(ag.add(w, w)))
    assert np.array_equal(w.grad, np.full(3, 2.0))


def test_backward_needs_scalar():
    p = ParamStore()
    w = p.add("w", np.ones(3))
    with pytest.raises(ContractError):
        backward(ag.mul(w, 2.0))


def test_getitem_and_broadcast_grads():
    rng = np.random.default_rng(3)
    p = ParamStore()
    w = p.add("w", rng.normal(size=(4, 3)))
    idx = np.array([[0, 2, 2], [3, 1, 0]])

    def f():
        g = ag.getitem(w, idx)
        b = ag.broadcast_to(ag.reshape(w[1], (1, 1, 3)), (2, 3, 3))
        return ag.sum(ag.mul(ag.transpose(g, (1, 0, 2)), ag.reciprocal(ag.add(ag.square(b), 1.0))[0, :2]))

    backward(f())
    assert max_rel_err(p.grads(), numeric_grads(p, f)) <= 1e-6


# ------------------------------------------------------------------ lstm


def _lstm_params(rng, n_in, hidden, scale=1.0):
    p = ParamStore()
    p.add("w", rng.normal(scale=scale, size=(n_in + hidden, 4 * hidden)))
    p.add("b", rng.normal(scale=scale, size=4 * hidden))
    return p


def test_lstm_zero_weights():
    p = ParamStore()
    p.add("w", np.zeros((5, 8)))
    p.add("b", np.zeros(8))
    for fused in (False, True):
        h, c = lstm_cell(np.random.default_rng(0).normal(size=(3, 3)), np.zeros((3, 2)), np.zeros((3, 2)),
                         p["w"], p["b"], fused=fused)
        assert np.all(h.value == 0)


def test_lstm_single_unit_by_hand():
    # gate pre-activations: i = 0.5, f = -1, g = 2, o = 0 for x = 1, h = 0
    w = np.array([[0.5, -1.0, 2.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    p = ParamStore()
    p.add("w", w)
    p.add("b", np.zeros(4))
    sig = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
    c = sig(-1.0) * 0.3 + sig(0.5) * math.tanh(2.0)
    h = sig(0.0) * math.tanh(c)
    for fused in (False, True):
        hh, cc = lstm_cell(np.array([[1.0]]), np.array([[0.0]]), np.array([[0.3]]), p["w"], p["b"], fused=fused)
        assert hh.value[0, 0] == pytest.approx(h, abs=1e-15)
        assert cc.value[0, 0] == pytest.approx(c, abs=1e-15)


def _unroll(p, xs, hidden, fused):
    h = Tensor(np.zeros((xs.shape[1], hidden)))
    c = Tensor(np.zeros((xs.shape[1], hidden)))
    total = None
    for x in xs:
        h, c = lstm_cell(x, h, c, p["w"], p["b"], fused=fused)
        term = ag.sum(h)
        total = term if total is None else ag.add(total, term)
    return ag.add(total, ag.sum(ag.square(c)))


@pytest.mark.parametrize("fused", [False, True])
def test_lstm_gradient_fd(fused):
    rng = np.random.default_rng(7)
    p = _lstm_params(rng, 3, 4, 0.5)
    xs = rng.normal(size=(4, 2, 3))
    backward(_unroll(p, xs, 4, fused))
    assert max_rel_err(p.grads(), numeric_grads(p, lambda: _unroll(p, xs, 4, fused))) <= 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_fused_lstm_equals_composed(seed):
    rng = np.random.default_rng(seed)
    p = _lstm_params(rng, 3, 5)
    xs = rng.normal(size=(3, 4, 3))
    a = _unroll(p, xs, 5, False)
    backward(a)
    ga = p.grads()
    p.zero_grad()
    b = _unroll(p, xs, 5, True)
    backward(b)
    assert a.value == pytest.approx(b.value, rel=1e-13)
    for name, g in p.grads().items():
        assert np.allclose(g, ga[name], rtol=1e-10, atol=1e-12)


def test_lstm_shape_error():
    p = _lstm_params(np.random.default_rng(0), 3, 4)
    with pytest.raises(ShapeError):
        lstm_cell(np.ones((1, 2)), np.zeros((1, 4)), np.zeros((1, 4)), p["w"], p["b"])


def test_longdouble_graph_keeps_dtype():
    rng = np.random.default_rng(0)
    p = _params(rng).copy(np.longdouble)
    x = rng.normal(size=(5, 3)).astype(np.longdouble)
    out = _composite(p, x)
    backward(out)
    assert out.value.dtype == np.longdouble
    assert p["w"].grad.dtype == np.longdouble


# ------------------------------------------------------------------- adam


def test_adam_zero_grad_fixed_point():
    p = ParamStore()
    p.add("w", np.array([1.0, -2.0]))
    adam_step(p, {"w": np.zeros(2)}, Adam(lr=0.1))
    assert np.array_equal(p["w"].value, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = ParamStore()
    p.add("w", np.array([1.0, -2.0, 3.0]))
    adam_step(p, {"w": np.array([0.3, -5.0, 100.0])}, Adam(lr=1e-2, eps=0.0))
    assert np.allclose(p["w"].value, [1.0 - 1e-2, -2.0 + 1e-2, 3.0 - 1e-2], atol=1e-15)


def test_adam_quadratic_bowl():
    target = np.array([3.0, -1.5, 0.25])
    p = ParamStore()
    p.add("w", np.zeros(3))
    opt = Adam(lr=1e-2)
    for _ in range(5000):
        opt.step(p, {"w": 2 * (p["w"].value - target)})
    assert np.max(np.abs(p["w"].value - target)) <= 1e-6


def test_adam_frozen():
    p = ParamStore()
    p.add("a", np.ones(2))
    p.add("b", np.ones(2))
    Adam(lr=0.5).step(p, {"a": np.ones(2), "b": np.ones(2)}, frozen={"b"})
    assert np.array_equal(p["b"].value, np.ones(2)) and np.all(p["a"].value < 1)


def test_checkpoint_round_trip(tmp_path):
    p = _params(np.random.default_rng(1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    back = load_checkpoint(path)
    assert list(back) == p.names()
    for n, t in p.items():
        assert np.array_equal(back[n], t.value)
    save_checkpoint(p, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "bad")


def test_param_store_contract():
    p = ParamStore()
    p.add("w", np.ones((2, 2)))
    with pytest.raises(ContractError):
        p.add("w", np.ones(1))
    with pytest.raises(ShapeError):
        p.set("w", np.ones(3))
