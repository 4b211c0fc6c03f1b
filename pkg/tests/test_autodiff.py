from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crl_lab import autodiff as ad
from crl_lab.autodiff import Tensor, gradients


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(op, *shapes, seed=0, tol=1e-7, positive=False):
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    leaves = [Tensor(x, requires_grad=True, name=f"x{i}") for i, x in enumerate(xs)]
    grads = gradients(ad.tsum(op(*leaves)))
    for i, x in enumerate(xs):
        def f(v, i=i):
            args = [Tensor(v if j == i else xs[j]) for j in range(len(xs))]
            return float(ad.tsum(op(*args)).data)
        np.testing.assert_allclose(grads[f"x{i}"], numeric_grad(f, x), atol=tol, rtol=1e-6)


@pytest.mark.parametrize("op,shapes,positive", [
    (lambda a, b: a + b, [(3, 4), (4,)], False),
    (lambda a, b: a - b, [(3, 1), (3, 4)], False),
    (lambda a, b: a * b, [(2, 3), (2, 3)], False),
    (lambda a, b: a / b, [(2, 3), (3,)], True),
    (lambda a: -a ** 3, [(4,)], False),
    (lambda a: ad.square(a), [(4,)], False),
    (lambda a: ad.tanh(a), [(3, 2)], False),
    (lambda a: ad.exp(a), [(3,)], False),
    (lambda a: ad.log(a), [(3,)], True),
    (lambda a, b: a @ b, [(3, 4), (4, 2)], False),
    (lambda a: a.mean(axis=0), [(3, 4)], False),
    (lambda a: a.sum(axis=1, keepdims=True) * a, [(3, 4)], False),
    (lambda a: a.reshape(6, 2), [(3, 4)], False),
    (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 1)], False),
    (lambda a: a[:, 1], [(3, 4)], False),
    (lambda a: ad.log_softmax(a) * np.arange(4.0), [(3, 4)], False),
    (lambda a: ad.take_rows(a, [0, 3, 1]), [(3, 4)], False),
])
def test_op_gradients_match_finite_differences(op, shapes, positive):
    check(op, *shapes, positive=positive)


def test_clip_and_minimum_route_gradients():
    x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True, name="x")
    g = gradients(ad.tsum(ad.clip(x, -1.0, 1.0)))["x"]
    assert g.tolist() == [0.0, 1.0, 0.0]
    a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, name="a")
    b = Tensor(np.array([2.0, 2.0, 1.0]), requires_grad=True, name="b")
    grads = gradients(ad.tsum(ad.minimum(a, b)))
    assert grads["a"].tolist() == [1.0, 1.0, 0.0]  # ties go to a
    assert grads["b"].tolist() == [0.0, 0.0, 1.0]


def test_same_named_leaves_accumulate():
    w1 = Tensor(np.array(2.0), requires_grad=True, name="w")
    w2 = Tensor(np.array(2.0), requires_grad=True, name="w")
    assert gradients(w1 * 3.0 + w2 * w2)["w"] == pytest.approx(3.0 + 4.0)


def test_reused_node_sums_paths():
    x = Tensor(np.array(1.5), requires_grad=True, name="x")
    y = ad.tanh(x)
    loss = y * y + y
    t = np.tanh(1.5)
    assert gradients(loss)["x"] == pytest.approx((2 * t + 1) * (1 - t * t), rel=1e-12)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        gradients(x * 2.0)


def test_wrt_list_and_missing_leaf():
    x = Tensor(np.ones(2), requires_grad=True, name="x")
    unused = Tensor(np.ones(3), requires_grad=True, name="u")
    gx, gu = gradients(ad.tsum(x * 4.0), wrt=[x, unused])
    assert gx.tolist() == [4.0, 4.0]
    assert gu.tolist() == [0.0, 0.0, 0.0]


def test_constants_build_no_graph():
    y = ad.tanh(Tensor(np.ones(3))) * 2.0
    assert not y.requires_grad and y._parents == ()


def test_ndarray_on_left_dispatches_to_tensor():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="x")
    out = np.array([3.0, 4.0]) * x
    assert isinstance(out, Tensor)
    assert gradients(ad.tsum(out))["x"].tolist() == [3.0, 4.0]


def test_matmul_requires_2d():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_log_softmax_rows_normalise(x):
    out = ad.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_backward_is_bit_reproducible(x):
    def run():
        t = Tensor(x, requires_grad=True, name="t")
        return gradients(ad.tsum(ad.tanh(t) * ad.exp(t * 0.5)))["t"]
    assert run().tobytes() == run().tobytes()
