import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcgn.tensor_core import (
    DimensionError,
    GradientCheckError,
    ParamTensor,
    activate,
    finite_diff_check,
    matmul,
    row_softmax,
)


def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), b), b)


def test_matmul_row_by_column():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_associative(rng):
    for _ in range(20):
        a, b, c = (rng.standard_normal(s) for s in ((3, 4), (4, 5), (5, 2)))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


@pytest.mark.parametrize("x, expected", [
    ([[0.0, 0.0, 0.0]], [[1 / 3, 1 / 3, 1 / 3]]),
    ([[1000.0, 1000.0]], [[0.5, 0.5]]),
    ([[0.0, math.log(3.0)]], [[0.25, 0.75]]),
])
def test_row_softmax_examples(x, expected):
    np.testing.assert_allclose(row_softmax(np.array(x)), expected, rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-700, 700)))
def test_row_softmax_rows_sum_to_one(x):
    out = row_softmax(x)
    assert np.all(np.isfinite(out))
    assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12


def test_activations():
    assert activate(np.array([[0.0]]), "sigmoid")[0, 0] == 0.5
    assert activate(np.array([[-2.0, 3.0]]), "relu").tolist() == [[0.0, 3.0]]
    assert activate(np.array([[math.log(3.0)]]), "sigmoid")[0, 0] == pytest.approx(0.75, abs=1e-15)
    # no overflow warnings at the extremes
    out = activate(np.array([[-1000.0, 1000.0]]), "sigmoid")
    assert out.tolist() == [[0.0, 1.0]]


def test_param_tensor_grad_starts_zero_and_resets():
    p = ParamTensor(np.ones((2, 3)))
    assert p.grad.shape == (2, 3) and not p.grad.any()
    p.grad += 5.0
    p.zero_grad()
    assert not p.grad.any()


def test_gradcheck_square():
    w = ParamTensor(np.array([[3.0]]))

    def analytic():
        w.grad += 2.0 * w.value

    report = finite_diff_check(lambda: float(w.value[0, 0] ** 2), [w], 1e-5, 1e-8, analytic)
    assert report.passed
    assert w.grad[0, 0] == 6.0
    assert report.params[0].max_rel_error < 1e-8


def test_gradcheck_constant():
    w = ParamTensor(np.array([[1.0, -2.0]]))
    report = finite_diff_check(lambda: 4.0, {"w": w}, analytic=lambda: None)
    assert report.passed and report.params[0].max_abs_error == 0.0


def test_gradcheck_flags_wrong_gradient():
    w = ParamTensor(np.array([[3.0]]))

    def analytic():
        w.grad += 3.0 * w.value  # wrong on purpose

    report = finite_diff_check(lambda: float(w.value[0, 0] ** 2), {"w": w}, analytic=analytic)
    assert not report.passed and report.failures == ["w"]


def test_gradcheck_aborts_on_non_finite_with_location():
    w = ParamTensor(np.array([[0.0, 1.0]]))

    def f():
        return float(np.log(w.value[0, 1] - 1.0 + 1e-6))  # NaN once perturbed downwards

    with pytest.raises(GradientCheckError, match=r"w\[\(0, 1\)\]"):
        finite_diff_check(f, {"w": w}, analytic=lambda: None)


def test_gradcheck_restores_values():
    w = ParamTensor(np.array([[1.5, 2.5]]))
    finite_diff_check(lambda: float((w.value ** 3).sum()), [w], analytic=lambda: None)
    assert w.value.tolist() == [[1.5, 2.5]]
