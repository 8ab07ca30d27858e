"""Reverse-mode gradients against central finite differences, op by op."""
import numpy as np
import pytest

from vlcl.errors import ContractViolation, ShapeMismatch
from vlcl.tensor import (
    Tensor,
    absolute,
    add,
    concat0,
    cross_entropy,
    embedding,
    finite_diff_grad,
    gelu,
    grad_enabled,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    reduce_mean,
    reduce_sum,
    reshape,
    row_slice,
    select,
    softmax,
    sub,
    transpose,
    using_dtype,
    zero_grads,
)

RTOL = 1e-4


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check(build, x: np.ndarray, step: float = 1e-5) -> None:
    """Compare backward() grads of scalar build(t) with central differences."""
    with using_dtype(np.float64):
        t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        out = build(t)
        out.backward()
        analytic = t.grad.copy()
        numeric = finite_diff_grad(build, Tensor(np.array(x, dtype=np.float64), requires_grad=True), step)
    assert _rel_err(analytic, numeric) <= RTOL


def test_add_sub_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        _check(lambda t: reduce_sum(mul(add(t, Tensor(b)), Tensor(b))), a)
        _check(lambda t: reduce_sum(mul(sub(t, Tensor(b)), t)), a)
        # broadcast onto the smaller operand too
        _check(lambda t: reduce_sum(mul(add(Tensor(a), t), Tensor(a))), b)


def test_neg_abs_grads():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6,)) + 0.3  # keep away from the |x| kink at 0
    _check(lambda t: reduce_sum(absolute(t)), x)
    _check(lambda t: reduce_sum(neg(mul(t, t))), x)


def test_matmul_grads_both_sides():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    _check(lambda t: reduce_sum(matmul(t, Tensor(b))), a)
    _check(lambda t: reduce_sum(matmul(Tensor(a), t)), b)
    # batched: (B, n, k) @ (k, m)
    c = rng.normal(size=(2, 3, 4))
    _check(lambda t: reduce_sum(matmul(t, Tensor(b))), c)


def test_reshape_transpose_grads():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 2, 3))
    _check(lambda t: reduce_sum(mul(reshape(t, (6, 4)), Tensor(np.ones((6, 4))))), x)
    _check(lambda t: reduce_sum(mul(transpose(t, (2, 0, 1)), Tensor(w))), x)


def test_reduce_grads_axis_and_keepdims():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 1))
    _check(lambda t: reduce_sum(mul(reduce_mean(t, axis=1, keepdims=True), Tensor(w))), x)
    _check(lambda t: reduce_mean(reduce_sum(t, axis=0)), x)


def test_gelu_grad():
    rng = np.random.default_rng(5)
    for _ in range(3):
        x = rng.normal(size=(4, 3))
        _check(lambda t: reduce_sum(gelu(t)), x)


def test_softmax_log_softmax_grads():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 5))
    _check(lambda t: reduce_sum(mul(softmax(t), Tensor(w))), x)
    _check(lambda t: reduce_sum(mul(log_softmax(t), Tensor(w))), x)


def test_softmax_frozen_constant():
    out = softmax(Tensor(np.zeros((1, 2))))
    assert np.allclose(out.data, [[0.5, 0.5]])
    rows = softmax(Tensor(np.array([[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]]))).data
    assert np.allclose(rows, 1.0 / 3.0)


def test_layer_norm_grad_and_moments():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 8))
    gamma = rng.normal(size=(8,))
    beta = rng.normal(size=(8,))
    _check(lambda t: reduce_sum(mul(layer_norm(t, gamma, beta), Tensor(np.ones((3, 8))))), x)
    with using_dtype(np.float64):
        out = layer_norm(Tensor(x), np.ones(8), np.zeros(8)).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_concat_row_slice_select_grads():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(2, 4))
    _check(lambda t: reduce_sum(mul(concat0([t, Tensor(b)]), Tensor(np.ones((5, 4))))), a)
    _check(lambda t: reduce_sum(row_slice(t, 1, 3)), a)
    _check(lambda t: reduce_sum(select(t, 2, axis=1)), a)


def test_embedding_gather_grad_accumulates_repeats():
    with using_dtype(np.float64):
        table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
        ids = np.array([[1, 1], [3, 0]])
        out = embedding(table, ids)
        assert out.shape == (2, 2, 3)
        reduce_sum(out).backward()
        expect = np.zeros((4, 3))
        expect[1] = 2.0  # row 1 gathered twice
        expect[0] = 1.0
        expect[3] = 1.0
        assert np.array_equal(table.grad, expect)
    with pytest.raises(IndexError):
        embedding(table, np.array([4]))
    with pytest.raises(ContractViolation):
        embedding(table, np.array([0.5]))


def test_cross_entropy_frozen_constants():
    # Two classes, zero logits: loss is ln 2 and the grads are +/- 0.5.
    with using_dtype(np.float64):
        logits = Tensor(np.zeros((1, 2)), requires_grad=True)
        loss = cross_entropy(logits, np.array([1]))
        assert abs(float(loss.data) - np.log(2.0)) < 1e-12
        loss.backward()
        assert np.allclose(logits.grad, [[0.5, -0.5]])


def test_cross_entropy_grad_fd_and_reductions():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    _check(lambda t: cross_entropy(t, labels), logits)
    _check(lambda t: cross_entropy(t, labels, reduction="sum"), logits)
    with pytest.raises(ShapeMismatch):
        cross_entropy(Tensor(np.zeros((2, 2, 2))), np.array([0, 1]))
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))


def test_quadratic_hand_grad():
    # d/dx sum(x^2) at x = 3 is 6.
    with using_dtype(np.float64):
        x = Tensor(np.array([3.0]), requires_grad=True)
        mul(x, x).sum().backward()
        assert np.allclose(x.grad, [6.0])


def test_finite_diff_helper_hand_value():
    # f(x) = sum(x^2) at [1, 2] differentiates to [2, 4].
    with using_dtype(np.float64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        fd = finite_diff_grad(lambda t: mul(t, t).sum(), x)
    assert np.allclose(fd, [2.0, 4.0], atol=1e-8)


def test_grad_accumulation_across_backwards():
    with using_dtype(np.float64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        mul(x, x).sum().backward()
        mul(x, x).sum().backward()
        assert np.allclose(x.grad, [8.0])  # 4 + 4
        zero_grads([x])
        assert x.grad is None


def test_shared_subexpression_accumulates_once_per_path():
    with using_dtype(np.float64):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = mul(x, x)
        add(y, y).sum().backward()  # d/dx 2x^2 = 4x
        assert np.allclose(x.grad, [12.0])


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        out = mul(x, x).sum()
    assert out._backward is None or not out.requires_grad
    assert x.grad is None


def test_requires_grad_guard_skips_frozen_operand():
    with using_dtype(np.float64):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=False)
        reduce_sum(matmul(a, b)).backward()
        assert a.grad is not None
        assert b.grad is None


def test_shape_mismatch_reports_op():
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_dtype_modes():
    with using_dtype(np.float32):
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float32
    with using_dtype(np.float64):
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float64


def test_backward_deterministic():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 4))
    grads = []
    for _ in range(2):
        with using_dtype(np.float64):
            t = Tensor(x.copy(), requires_grad=True)
            reduce_sum(mul(softmax(t), gelu(t))).backward()
            grads.append(t.grad.copy())
    assert np.array_equal(grads[0], grads[1])
