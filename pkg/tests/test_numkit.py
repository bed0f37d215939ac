import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedack import numkit as nk
from fedack.numkit import AdamState, ParamSet, Tensor

from oracles import gradcheck

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def grad_of(fn, x):
    t = leaf(x)
    nk.backward(fn(t))
    return t.grad


def numeric(fn, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (float(fn(Tensor(up)).data) - float(fn(Tensor(dn)).data)) / (2 * h)
    return g


UNARY = {
    "tanh": nk.tanh,
    "sigmoid": nk.sigmoid,
    "exp": nk.exp,
    "square": nk.square,
    "leaky_relu": nk.leaky_relu,
    "softmax": lambda a: nk.softmax(a, axis=-1),
    "log_softmax": lambda a: nk.log_softmax(a, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    fn = lambda t: nk.sum(nk.mul(UNARY[name](t), w))  # noqa: E731
    np.testing.assert_allclose(grad_of(fn, x), numeric(fn, x), rtol=1e-5, atol=1e-7)


def test_broadcast_add_and_mul_reduce_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    ta, tb = leaf(a), leaf(b)
    nk.backward(nk.sum(nk.mul(nk.add(ta, tb), ta)))
    np.testing.assert_allclose(tb.grad, a.sum(axis=0))
    np.testing.assert_allclose(ta.grad, 2 * a + b)


def test_dense_and_matmul_batched():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 3))
    ps = ParamSet([("W", rng.standard_normal((3, 4))), ("b", rng.standard_normal(4))])
    out = nk.dense(x, ps["W"], ps["b"])
    np.testing.assert_allclose(out.data, x @ ps["W"].data + ps["b"].data)
    assert gradcheck(ps, lambda p: nk.sum(nk.tanh(nk.dense(x, p["W"], p["b"])))) < 1e-6


def test_dense_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\)"):
        nk.dense(np.zeros((2, 5)), leaf(np.zeros((3, 4))), leaf(np.zeros(4)))


def test_masked_softmax_zeros_masked_and_empty_rows():
    x = Tensor([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    mask = np.array([[True, False, True], [False, False, False]])
    out = nk.softmax(x, axis=1, mask=mask).data
    assert out[0, 1] == 0.0
    assert math.isclose(out[0].sum(), 1.0)
    assert np.all(out[1] == 0.0)


def test_cosine_zero_norm_is_zero_without_gradient():
    a = leaf(np.zeros((1, 3)))
    b = leaf(np.ones((1, 3)))
    c = nk.cosine_similarity(a, b)
    assert c.data[0] == 0.0
    nk.backward(nk.sum(c))
    assert np.all(a.grad == 0) and np.all(b.grad == 0)


def test_cosine_and_pairwise_gradients():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    fn = lambda t: nk.sum(nk.cosine_similarity(t, b))  # noqa: E731
    np.testing.assert_allclose(grad_of(fn, a), numeric(fn, a), rtol=1e-5, atol=1e-8)
    w = rng.standard_normal((4, 4))
    fn2 = lambda t: nk.sum(nk.mul(nk.pairwise_distance(t), w))  # noqa: E731
    np.testing.assert_allclose(grad_of(fn2, a), numeric(fn2, a), rtol=1e-5, atol=1e-7)


def test_concat_reshape_mean_maximum():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    ta, tb = leaf(a), leaf(b)
    out = nk.mean(nk.reshape(nk.concat([ta, tb], axis=1), (10,)))
    nk.backward(out)
    np.testing.assert_allclose(ta.grad, np.full((2, 3), 0.1))
    np.testing.assert_allclose(tb.grad, np.full((2, 2), 0.1))
    t = leaf([-2.0, 0.5])
    nk.backward(nk.sum(nk.maximum(t, 0.0)))
    np.testing.assert_array_equal(t.grad, [0.0, 1.0])


def test_backward_rejects_non_scalar_and_consumes_tape():
    t = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        nk.backward(nk.mul(t, 2.0))
    loss = nk.sum(nk.square(t))
    nk.backward(loss)
    assert loss._parents == () and loss._backward is None


def test_shared_subexpression_accumulates():
    t = leaf(3.0)
    y = nk.mul(t, t)
    nk.backward(nk.add(y, y))
    assert float(t.grad) == 12.0


def test_constants_record_nothing():
    out = nk.tanh(nk.add(Tensor(np.ones(3)), 1.0))
    assert not out.requires_grad and out._parents == ()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_log_softmax_rows_normalise(x):
    out = nk.log_softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 2), elements=finite))
def test_pairwise_distance_symmetric_zero_diagonal(x):
    d = nk.pairwise_distance(Tensor(x)).data
    np.testing.assert_array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)


# ---------------------------------------------------------------- ParamSet / Adam


def test_paramset_rejects_duplicates_and_roundtrips_json():
    with pytest.raises(ValueError):
        ParamSet([("a", np.zeros(1)), ("a", np.zeros(1))])
    rng = np.random.default_rng(5)
    ps = ParamSet([("w", rng.standard_normal((2, 3))), ("b", rng.standard_normal(3))])
    back = ParamSet.from_json(ps.to_json())
    assert back.fingerprint() == ps.fingerprint()
    assert back.signature() == ps.signature()


def test_paramset_from_dict_checks_sizes():
    with pytest.raises(ValueError, match="shape"):
        ParamSet.from_dict({"w": {"shape": [2, 2], "data": [1.0, 2.0, 3.0]}})


def test_frozen_shares_storage_copy_does_not():
    ps = ParamSet([("w", np.ones(2))])
    fz, cp = ps.frozen(), ps.copy()
    ps["w"].data[0] = 5.0
    assert fz["w"].data[0] == 5.0 and cp["w"].data[0] == 1.0
    assert not fz["w"].requires_grad


def test_merge_and_select_share_tensors():
    a = ParamSet([("w", np.ones(2))])
    b = ParamSet([("w", np.zeros(2))])
    m = nk.merge(e=a, d=b)
    assert m.names() == ["e.w", "d.w"]
    assert m.select("d.")["w"] is b["w"]


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    ps = ParamSet([("w", np.array([1.0, -1.0, 0.5]))])
    ps["w"].grad = np.array([3.0, -0.2, 1e-3])
    state = AdamState(learning_rate=0.1)
    nk.adam_step(ps, state)
    # bias-corrected first step is lr * g / (|g| + eps)
    expect = np.array([1.0, -1.0, 0.5]) - 0.1 * np.array([3.0, -0.2, 1e-3]) / (np.abs([3.0, -0.2, 1e-3]) + 1e-8)
    np.testing.assert_allclose(ps["w"].data, expect, rtol=1e-12)
    assert ps["w"].grad is None and state.step_count == 1


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(6)
    w0 = rng.standard_normal(4)
    grads = rng.standard_normal((5, 4))
    ps = ParamSet([("w", w0.copy())])
    state = AdamState()
    m = v = np.zeros(4)
    w = w0.copy()
    for t, g in enumerate(grads, start=1):
        ps["w"].grad = g.copy()
        nk.adam_step(ps, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(ps["w"].data, w, rtol=1e-12)


def test_adam_missing_gradient_is_an_error():
    ps = ParamSet([("w", np.ones(2))])
    with pytest.raises(ValueError, match="w"):
        nk.adam_step(ps, AdamState())


def test_adam_minimises_quadratic():
    ps = ParamSet([("w", np.array([3.0, -2.0]))])
    state = AdamState(learning_rate=0.1)
    for _ in range(300):
        nk.backward(nk.sum(nk.square(ps["w"])))
        nk.adam_step(ps, state)
    assert np.all(np.abs(ps["w"].data) < 1e-2)


def test_glorot_bounds():
    w = nk.glorot(np.random.default_rng(0), 10, 30)
    assert w.shape == (10, 30)
    assert np.all(np.abs(w) <= math.sqrt(6 / 40))
