import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpoplab import autodiff as ad
from dpoplab.autodiff import Tensor
from dpoplab.exceptions import ContractError, DimensionError, NumericError

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_log_softmax_uniform_row():
    out = ad.log_softmax(Tensor(np.zeros((1, 4))))
    np.testing.assert_allclose(out.data, np.full((1, 4), -1.3862943611198906), rtol=0, atol=1e-15)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_finite_output_names_op():
    with pytest.raises(NumericError, match="exp"):
        ad.exp(Tensor([1000.0]))


@pytest.mark.parametrize("i, expected", [(0, 0.75), (1, -0.25)])
def test_log_softmax_adjoint_uniform(i, expected):
    theta = leaf(np.zeros(4))
    ad.backward(ad.gather(ad.log_softmax(theta), np.array(0)))
    assert theta.grad[i] == pytest.approx(expected, abs=1e-15)


def test_sum_grad_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_sigmoid_grad_at_zero():
    x = leaf(0.0)
    ad.backward(ad.sigmoid(x))
    assert x.grad == 0.25


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(ad.scale(x, 2.0))


def test_backward_zeroes_accumulators_first():
    x = leaf([1.0, 2.0])
    x.grad = np.array([100.0, 100.0])
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_fan_out_accumulates():
    x = leaf([0.3, -1.2])
    y = ad.add(ad.square(x), ad.scale(x, 3.0))
    ad.backward(ad.sum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, rtol=0, atol=1e-15)


def test_graph_visited_once_in_topological_order():
    x = leaf([1.0, 2.0])
    a = ad.exp(x)
    b = ad.mul(a, a)
    s = ad.sum(ad.add(a, b))
    order = ad.topological_order(s)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(order) == len(pos)
    for n in order:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_max0_subgradient_zero_at_boundary():
    x = leaf([-1.0, 0.0, 2.0])
    ad.backward(ad.sum(ad.max0(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_log_sigmoid_stable_far_left():
    x = leaf([-800.0])
    y = ad.log_sigmoid(x)
    assert y.data[0] == pytest.approx(-800.0)
    ad.backward(ad.sum(y))
    assert x.grad[0] == pytest.approx(1.0)


def test_grad_check_sigmoid_sum():
    x = leaf(np.random.default_rng(1).normal(size=7))
    err = ad.grad_check(lambda: ad.sum(ad.sigmoid(x)), [x], eps=1e-5)
    assert err <= 1e-6


def test_grad_check_constant():
    x = leaf([1.0, 2.0])
    assert ad.grad_check(lambda: Tensor(3.0), [x], eps=1e-5) == 0.0


def test_grad_check_rejects_bad_eps():
    x = leaf([1.0])
    with pytest.raises(ContractError):
        ad.grad_check(lambda: ad.sum(x), [x], eps=1e-2)


def _all_ops_sink(x, w, idx):
    """Scalar touching every primitive."""
    h = ad.layer_norm(x, ad.add(w[0], 1.0), w[1])
    h = ad.matmul(ad.reshape(h, (2, 3, 4)), ad.reshape(ad.concat([w[2], w[3]]), (4, 2)))
    h = ad.transpose(h, (0, 2, 1))
    h = ad.masked_fill(h, np.array([[True, False, False]]), -3.0)
    a = ad.log_softmax(h)
    b = ad.softmax(ad.mul(h, 0.5))
    c = ad.gather(a, idx)
    e = ad.embedding(ad.reshape(w[4], (4, 2)), np.array([0, 3, 3]))
    f = ad.affine(ad.reshape(x, (6, 4)), ad.reshape(ad.concat([w[2], w[3]]), (4, 2)), w[5])
    terms = [
        ad.sum(c), ad.mean(ad.log(ad.add(b, 1e-3))), ad.sum(ad.sigmoid(e)),
        ad.sum(ad.log_sigmoid(ad.neg(f))), ad.sum(ad.max0(ad.sub(f, 0.05))),
        ad.mean(ad.exp(ad.scale(e, 0.3))), ad.sum(ad.select(ad.reshape(f, (3, 2, 2)), 1)),
    ]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def test_grad_check_all_primitives():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(2, 3, 4)))
    w = [leaf(rng.normal(size=4) * 0.1), leaf(rng.normal(size=4)),
         leaf(rng.normal(size=(2, 2))), leaf(rng.normal(size=(2, 2))),
         leaf(rng.normal(size=8)), leaf(rng.normal(size=2))]
    idx = np.array([[0, 2], [1, 1]])
    err = ad.grad_check(lambda: _all_ops_sink(x, w, idx), [x] + w, eps=1e-5)
    assert err <= 1e-5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_log_softmax_rows_normalised(z):
    out = ad.log_softmax(Tensor(z)).data
    assert np.all(np.abs(np.exp(out).sum(axis=1) - 1.0) <= 1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite), st.floats(-50, 50))
def test_log_softmax_shift_invariant(z, c):
    a = ad.log_softmax(Tensor(z)).data
    b = ad.log_softmax(Tensor(z + c)).data
    assert np.max(np.abs(a - b)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4,), elements=finite), arrays(np.float64, (4, 3), elements=finite))
def test_grad_check_property(v, m):
    x = leaf(v * 0.2)
    W = leaf(m * 0.2)
    f = lambda: ad.sum(ad.log_sigmoid(ad.matmul(ad.reshape(x, (1, 4)), W)))  # noqa: E731
    assert ad.grad_check(f, [x, W], eps=1e-5) <= 1e-5


def test_sigmoid_matches_math():
    for v in (-30.0, -1.0, 0.3, 12.0):
        assert ad.sigmoid(Tensor(v)).item() == pytest.approx(1 / (1 + math.exp(-v)), rel=1e-15)
