import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vitcompress.numerics import (
    DimensionError,
    Tensor,
    UnknownParameterError,
    concat,
    count_macs,
    cross_entropy,
    gelu,
    getitem,
    grad_of,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    norm2,
    reshape,
    scatter_last,
    softmax,
    transpose,
    tsum,
)


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


def fd_check(fn, inputs, rng, h=1e-3, tol=1e-2, n_dirs=3):
    """Directional central differences in f64 against the tape gradient."""
    out = fn(*inputs)
    w = rng.normal(size=out.shape)
    loss = tsum(mul(out, Tensor(w.astype(np.float32))))
    grads = grad_of(loss, inputs)

    def f(vals):
        with no_grad():
            r = fn(*[Tensor(v) for v in vals]).data.astype(np.float64)
        return float((r * w).sum())

    base = [x.data.astype(np.float64) for x in inputs]
    for _ in range(n_dirs):
        dirs = [rng.normal(size=x.shape) for x in inputs]
        dirs = [d / (np.linalg.norm(d) + 1e-12) for d in dirs]
        plus = [(b + h * d).astype(np.float32) for b, d in zip(base, dirs)]
        minus = [(b - h * d).astype(np.float32) for b, d in zip(base, dirs)]
        numeric = (f(plus) - f(minus)) / (2 * h)
        analytic = sum(float((grads[x].astype(np.float64) * d).sum()) for x, d in zip(inputs, dirs))
        assert abs(numeric - analytic) <= tol * max(1.0, abs(numeric), abs(analytic)), (numeric, analytic)


# ---------------------------------------------------------------- forward oracles

def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    out = matmul(T(a), T(b)).data
    ref = np.zeros((2, 3, 5))
    for n in range(2):
        for i in range(3):
            for j in range(5):
                ref[n, i, j] = sum(a[n, i, k] * b[n, k, j] for k in range(4))
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_matmul_broadcasts_leading_dims(rng):
    a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 6))
    assert matmul(T(a), T(b)).shape == (3, 2, 6)


def test_matmul_inner_mismatch_raises():
    with pytest.raises(DimensionError):
        matmul(T(np.ones((2, 3))), T(np.ones((4, 2))))


def test_softmax_rows_sum_to_one_and_shift_invariant(rng):
    x = rng.normal(size=(4, 7)) * 5
    p = softmax(T(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax(T(x + 100.0)).data, p, atol=1e-6)


def test_softmax_uniform_on_equal_logits():
    np.testing.assert_allclose(softmax(T(np.zeros((1, 4)))).data, [[0.25] * 4])


def test_layer_norm_examples():
    g, b = T(np.ones(4)), T(np.zeros(4))
    np.testing.assert_allclose(layer_norm(T([[5, 5, 5, 5]]), g, b).data, 0.0, atol=1e-6)
    out = layer_norm(T([[1.0, -1.0]]), T(np.ones(2)), T(np.zeros(2)), eps=1e-12).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_rejects_bad_gamma():
    with pytest.raises(DimensionError):
        layer_norm(T(np.ones((2, 4))), T(np.ones(3)), T(np.zeros(4)))


def test_gelu_reference_values():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(gelu(T(x)).data, ref, rtol=1e-6, atol=1e-7)


def test_cross_entropy_uniform_logits_is_log_k():
    loss = cross_entropy(T(np.zeros((3, 10))), np.array([0, 4, 9]))
    assert float(loss.data) == pytest.approx(math.log(10), rel=1e-6)


def test_cross_entropy_soft_equals_hard_for_one_hot(rng):
    z = rng.normal(size=(5, 4))
    y = np.array([0, 1, 2, 3, 1])
    assert float(cross_entropy(T(z), y).data) == pytest.approx(float(cross_entropy(T(z), np.eye(4)[y]).data))


def test_scatter_last_places_columns():
    out = scatter_last(T([[1.0, 2.0]]), np.array([3, 0]), 4).data
    np.testing.assert_array_equal(out, [[2.0, 0.0, 0.0, 1.0]])


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("name,fn,shapes", [
    ("matmul", lambda a, b: matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    ("linear", lambda x, w, b: linear(x, w, b), [(2, 3, 4), (4, 6), (6,)]),
    ("mul_broadcast", lambda a, b: mul(a, b), [(3, 4), (4,)]),
    ("gelu", lambda x: gelu(x), [(3, 5)]),
    ("softmax", lambda x: softmax(x, axis=-1), [(2, 6)]),
    ("layer_norm", lambda x, g, b: layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("norm2", lambda x: norm2(x), [(3, 4)]),
    ("mean", lambda x: mean(x, axis=0), [(4, 3)]),
    ("reshape_transpose", lambda x: transpose(reshape(x, (3, 2, 2)), (2, 0, 1)), [(3, 4)]),
    ("getitem_fancy", lambda x: getitem(x, (np.array([0, 0, 2]), slice(None))), [(3, 4)]),
    ("concat", lambda a, b: concat([a, b], axis=0), [(2, 3), (1, 3)]),
    ("scatter_last", lambda x: scatter_last(x, np.array([4, 1, 2]), 5), [(2, 3)]),
])
def test_op_gradients_match_finite_differences(name, fn, shapes, rng):
    inputs = [T(rng.normal(size=s)) for s in shapes]
    fd_check(fn, inputs, rng)


def test_cross_entropy_gradient(rng):
    y = np.array([1, 0, 3])
    fd_check(lambda z: cross_entropy(z, y), [T(rng.normal(size=(3, 4)))], rng)


def test_shared_input_accumulates_gradient():
    x = T([2.0, -1.0])
    g = grad_of(tsum(mul(x, x)), [x])[x]
    np.testing.assert_allclose(g, [4.0, -2.0])


def test_grad_of_unknown_parameter_raises():
    x, other = T([1.0]), T([2.0])
    with pytest.raises(UnknownParameterError):
        grad_of(tsum(mul(x, x)), [other])


def test_no_grad_builds_no_tape():
    x = T([1.0, 2.0])
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_division_by_tensor_is_rejected():
    with pytest.raises(TypeError):
        _ = T([1.0]) / T([2.0])


# ---------------------------------------------------------------- instrumentation

def test_mac_counter_counts_every_matmul(rng):
    a, b = T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(4, 5)))
    with count_macs() as c:
        matmul(a, b)
        linear(a, T(rng.normal(size=(4, 7))))
    assert c.total == 2 * 3 * 4 * 5 + 6 * 4 * 7


@given(arrays(np.float32, (3, 4), elements=st.floats(-50, 50, width=32)))
def test_softmax_is_a_distribution(x):
    p = softmax(T(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-5)


@given(arrays(np.float32, (2, 8), elements=st.floats(-100, 100, width=32)),
       st.floats(0.5, 3.0), st.floats(-2.0, 2.0))
def test_layer_norm_output_standardized(x, g, b):
    out = layer_norm(T(x), T(np.full(8, g)), T(np.full(8, b))).data.astype(np.float64)
    spread = x.astype(np.float64).std(-1)
    for row, s in zip(out, spread):
        assert abs(row.mean() - b) < 1e-4
        if s > 1e-2:
            assert abs(row.std() - g) < 1e-2 * g
