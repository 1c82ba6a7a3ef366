import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlmspt import tensor as T
from mlmspt.tensor import ContractError, NumericError, ShapeError, Tensor

from conftest import finite_diff, rel_err
from oracles import matmul_loops


def test_matmul_identity_and_scalar():
    b = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(np.eye(2), b).data, b)
    assert T.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(a, b).data, matmul_loops(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_matmul_oracle_property(r, k, c, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(r, k)), g.normal(size=(k, c))
    np.testing.assert_allclose(T.matmul(a, b).data, matmul_loops(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4])
    np.testing.assert_allclose(T.softmax_rows([[0.0, math.log(3.0)]]).data, [[0.25, 0.75]], atol=1e-15)
    y = T.softmax_rows([[50.0, 0.0, 0.0, 0.0]]).data
    assert y.max() >= 1 - 1e-9


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax_rows([[0.0, float("nan")]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(0.1, 30), st.integers(0, 2**31))
def test_softmax_rows_stochastic(n, k, spread, seed):
    x = np.random.default_rng(seed).normal(scale=spread, size=(n, k))
    y = T.softmax_rows(x).data
    assert np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    T.backward(T.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_backward_sum_softmax_is_zero(rng):
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    T.backward(T.sum_all(T.softmax_rows(x)))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_backward_sum_matmul_matches_fd(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    T.backward(T.sum_all(T.matmul(a, b)))
    f = lambda: T.sum_all(T.matmul(a, b)).item()
    assert rel_err(a.grad, finite_diff(f, a.data)) <= 1e-6
    assert rel_err(b.grad, finite_diff(f, b.data)) <= 1e-6


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(Tensor(np.ones((2, 2)), requires_grad=True))


def test_backward_accumulates_until_cleared():
    x = Tensor(2.0, requires_grad=True)
    T.backward(T.scale(x, 3.0))
    T.backward(T.scale(x, 3.0))
    assert x.grad == pytest.approx(6.0)
    x.zero_grad()
    T.backward(T.scale(x, 3.0))
    assert x.grad == pytest.approx(3.0)


def test_shared_subexpression_gradient():
    # y = relu(x) used twice
    x = Tensor([[1.0, -2.0]], requires_grad=True)
    r = T.relu(x)
    T.backward(T.sum_all(T.add(r, r)))
    np.testing.assert_array_equal(x.grad, [[2.0, 0.0]])


def test_dtype_preserved():
    a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = T.softmax_rows(T.matmul(a, a))
    assert out.dtype == np.float32
    T.backward(T.sum_all(out))
    assert a.grad.dtype == np.float32


def _unary_ops():
    return {
        "relu": T.relu,
        "softmax_rows": T.softmax_rows,
        "transpose": T.transpose,
        "scale": lambda x: T.scale(x, 0.37),
        "max_rows": T.max_rows,
        "mean_rows": T.mean_rows,
        "slice_cols": lambda x: T.slice_cols(x, 0, max(1, x.shape[1] // 2)),
        "self_concat": lambda x: T.concat([x, T.relu(x)]),
        "self_matmul": lambda x: T.matmul(x, T.transpose(x)),
    }


@pytest.mark.parametrize("name", sorted(_unary_ops()))
@settings(max_examples=8, deadline=None)
@given(n=st.integers(1, 8), k=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_op_gradients_match_fd(name, n, k, seed):
    g = np.random.default_rng(seed)
    x = Tensor(g.normal(size=(n, k)), requires_grad=True)
    op = _unary_ops()[name]
    out_shape = op(x).shape
    r = g.normal(size=out_shape)
    loss = lambda: T.sum_all(T.mul(op(x), Tensor(r)))
    T.backward(loss())
    assert rel_err(x.grad, finite_diff(lambda: loss().item(), x.data)) <= 1e-4


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 8), k=st.integers(2, 8), seed=st.integers(0, 2**31))
def test_cross_entropy_grad_is_softmax_minus_onehot(n, k, seed):
    g = np.random.default_rng(seed)
    logits = Tensor(g.normal(size=(n, k)), requires_grad=True)
    t = g.integers(0, k, size=n)
    T.backward(T.cross_entropy(logits, t))
    p = T.softmax_rows(logits.data).data
    expected = (p - np.eye(k)[t]) / n
    np.testing.assert_allclose(logits.grad, expected, atol=1e-10, rtol=0)


def test_cross_entropy_examples():
    assert T.cross_entropy(np.zeros(4), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    assert T.cross_entropy([50.0, 0.0, 0.0], 0).item() <= 1e-9
    assert T.cross_entropy([1.0, 0.0], 0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert math.log(1 + math.exp(-1)) == pytest.approx(0.31326, abs=1e-5)


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        T.cross_entropy(np.zeros((2, 3)), [0, 3])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_cross_entropy_nonnegative(n, k, seed):
    g = np.random.default_rng(seed)
    assert T.cross_entropy(g.normal(scale=5, size=(n, k)), g.integers(0, k, size=n)).item() >= 0
