"""Tape mechanics, elementary ops and the gradient checker."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqlidar import l4dt
from seqlidar.errors import ContractError, EvaluationError, FormatError
from seqlidar.gradcheck import grad_check, numeric_gradient
from seqlidar.tensor import (
    Tensor,
    backward,
    concat,
    exp,
    log,
    matmul,
    maximum,
    no_grad,
    relu,
    sigmoid,
    silu,
    split,
    sqrt,
    transpose,
)


def test_sum_of_squares_gradient_is_exact(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_non_scalar_loss_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_shared_subexpression_accumulates(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    y = x * 3.0
    backward((y * y + y).sum())
    np.testing.assert_allclose(x.grad, 18 * x.data + 3.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_grad_matches_dtype(rng):
    x = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
    backward((x * x).sum())
    assert x.grad.dtype == np.float32 and x.grad.shape == x.shape


def test_broadcast_gradients_reduce_to_operand_shape(rng):
    a = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    backward((a * b).sum())
    np.testing.assert_allclose(a.grad[:, 0], b.data.sum() * np.ones(3))
    np.testing.assert_allclose(b.grad[0], a.data.sum() * np.ones(4))


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: exp(t).sum(),
        lambda t: log(t * t + 1.0).sum(),
        lambda t: sqrt(t * t + 1.0).sum(),
        lambda t: sigmoid(t).sum(),
        lambda t: silu(t).sum(),
        lambda t: (t / (t * t + 2.0)).sum(),
        lambda t: (t**3).mean(),
        lambda t: transpose(t.reshape(2, 3), (1, 0))[1:, :].sum() * 2.0,
        lambda t: (t[np.array([0, 0, 4])] * 3.0).sum(),
        lambda t: (concat(split(t, [2, 4]), axis=0) ** 2).sum(),
        lambda t: matmul(t.reshape(2, 3), transpose(t.reshape(2, 3), (1, 0))).sum(),
    ],
)
def test_elementary_gradients(fn, rng):
    assert grad_check(fn, rng.standard_normal(6)) < 1e-7


def test_grad_check_linear_is_exact(rng):
    w = rng.standard_normal(5)
    assert grad_check(lambda t: (t * w).sum(), rng.standard_normal(5)) < 1e-9


def test_grad_check_quadratic(rng):
    A = rng.standard_normal((4, 4))
    f = lambda t: (matmul(t.reshape(1, 4), Tensor(A)) * t.reshape(1, 4)).sum()  # noqa: E731
    assert grad_check(f, rng.standard_normal(4)) < 1e-7


def test_grad_check_skips_kinked_coordinates():
    x = np.array([0.0, 1.0, -2.0])
    _, kinked = numeric_gradient(lambda t: relu(t).sum(), x)
    assert kinked.tolist() == [True, False, False]
    assert grad_check(lambda t: maximum(t, 0.0).sum() * 1.0, x) < 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite_raises():
    with pytest.raises(EvaluationError):
        grad_check(lambda t: log(t).sum(), np.array([-1.0, 1.0]))


def test_check_finite_flags_nan():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([1.0, np.nan])).check_finite()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_l4dt_round_trip_float64(a):
    b = l4dt.from_bytes(l4dt.to_bytes(a))
    assert b.dtype == np.float64 and b.shape == a.shape
    np.testing.assert_array_equal(a, b)


def test_l4dt_header_layout():
    raw = l4dt.to_bytes(np.zeros((2, 3), np.float32))
    assert raw[:4] == bytes([0x4C, 0x34, 0x44, 0x54])
    assert raw[4:7] == bytes([1, 0, 2])
    assert int.from_bytes(raw[7:15], "little") == 2
    assert int.from_bytes(raw[15:23], "little") == 3
    assert len(raw) == 23 + 6 * 4


def test_l4dt_rejects_bad_magic_and_truncation():
    raw = l4dt.to_bytes(np.ones(4))
    with pytest.raises(FormatError):
        l4dt.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        l4dt.from_bytes(raw[:-1])
    with pytest.raises(FormatError):
        l4dt.to_bytes(np.ones(2, dtype=np.int32))
