import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stgt.numerics import (
    ConfigError,
    DimensionError,
    OracleError,
    ParamVector,
    Segment,
    finite_diff_grad,
    gelu_backward,
    gelu_forward,
    l2_normalize_backward,
    l2_normalize_forward,
    l2_normalize_rows,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    masked_softmax,
    matmul,
    relative_error,
    softmax,
    softmax_backward,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# --- matmul ----------------------------------------------------------------


def test_matmul_identity(rng):
    m = rng.normal(size=(2, 2))
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_zero_annihilates(rng):
    assert np.array_equal(matmul(np.zeros((2, 3)), rng.normal(size=(3, 4))), np.zeros((2, 4)))


def test_matmul_hand_example():
    out = matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]]))
    assert np.array_equal(out, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


@given(
    st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31)
)
def test_matmul_associative_with_identity(r, k, c, e, seed):
    g = np.random.default_rng(seed)
    a, b, m = (g.uniform(-10, 10, size=s) for s in ((r, k), (k, c), (c, e)))
    left, right = matmul(matmul(a, b), m), matmul(a, matmul(b, m))
    # relative to the magnitude of the result
    assert np.abs(left - right).max() <= 1e-10 * max(1.0, np.abs(left).max())
    assert np.array_equal(matmul(a, np.eye(k)), a)


# --- masked softmax ----------------------------------------------------------


def test_masked_softmax_uniform_row():
    out = masked_softmax(np.full((1, 3), 2.5), np.ones((1, 3), bool))
    assert np.allclose(out, 1 / 3, atol=1e-15)


def test_masked_softmax_single_survivor():
    out = masked_softmax(np.array([[5.0, -2.0]]), np.array([[True, False]]))
    assert np.array_equal(out, [[1.0, 0.0]])


def test_masked_softmax_scalar_oracle():
    z = np.array([1.0, 2.0, 3.0])
    oracle = [math.exp(v) / sum(math.exp(u) for u in z) for v in z]
    out = masked_softmax(z[None], np.ones((1, 3), bool))[0]
    assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)
    assert np.allclose(out, oracle, atol=1e-15)


def test_masked_softmax_empty_row_is_zero():
    out = masked_softmax(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[False, False], [True, True]]))
    assert np.array_equal(out[0], [0.0, 0.0])
    assert np.all(np.isfinite(out))


def test_masked_softmax_shape_mismatch():
    with pytest.raises(DimensionError):
        masked_softmax(np.zeros((2, 3)), np.ones((3, 2), bool))


@given(
    arrays(np.float64, (4, 5), elements=st.floats(-50, 50)),
    arrays(np.bool_, (4, 5)),
)
def test_masked_softmax_rows_sum(logits, keep):
    p = masked_softmax(logits, keep)
    sums = p.sum(axis=1)
    live = keep.any(axis=1)
    assert np.allclose(sums[live], 1.0, atol=1e-12)
    assert np.all(sums[~live] == 0.0)
    assert np.all(p[~keep] == 0.0)
    assert np.all(np.isfinite(p))


def test_softmax_backward_matches_fd(rng):
    z = rng.normal(size=5)
    w = rng.normal(size=5)
    analytic = softmax_backward(w, softmax(z))
    numeric = finite_diff_grad(lambda t: float(softmax(t) @ w), z)
    assert relative_error(analytic, numeric).max() < 1e-7


# --- layer norm --------------------------------------------------------------


def test_layer_norm_constant_row_collapses_to_bias():
    out = layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
    assert np.allclose(out, 0.0, atol=1e-12)


def test_layer_norm_normalized_row_small_eps():
    out = layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-12)
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-10)


def test_layer_norm_hand_example():
    out = layer_norm(np.array([[1.0, 2.0, 3.0]]), np.ones(3), np.zeros(3), eps=1e-5)
    assert np.allclose(out, [[-1.22474, 0.0, 1.22474]], atol=1e-4)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        layer_norm(np.ones((1, 2)), np.ones(2), np.zeros(2), eps=0.0)


@given(arrays(np.float64, (3, 6), elements=finite))
def test_layer_norm_two_pass_formula(x):
    out = layer_norm(x, np.ones(6), np.zeros(6), eps=1e-5)
    mu = x.sum(axis=1, keepdims=True) / 6
    var = ((x - mu) ** 2).sum(axis=1, keepdims=True) / 6
    assert np.allclose(out, (x - mu) / np.sqrt(var + 1e-5), atol=1e-10)


def test_layer_norm_backward_matches_fd(rng):
    x = rng.normal(size=(3, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    _, cache = layer_norm_forward(x, g, b)
    dx, dg, db = layer_norm_backward(w, cache)
    theta = np.concatenate([x.ravel(), g, b])

    def f(t):
        return float(np.sum(layer_norm(t[:15].reshape(3, 5), t[15:20], t[20:]) * w))

    numeric = finite_diff_grad(f, theta)
    assert relative_error(np.concatenate([dx.ravel(), dg, db]), numeric).max() < 1e-6


# --- l2 normalize ------------------------------------------------------------


def test_l2_normalize_345():
    assert np.allclose(l2_normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_zero_row_unchanged():
    assert np.array_equal(l2_normalize_rows(np.zeros((1, 2))), np.zeros((1, 2)))


def test_l2_normalize_random_rows_unit(rng):
    y = l2_normalize_rows(rng.normal(size=(4, 8)))
    norms = np.sqrt(np.einsum("ij,ij->i", y, y))
    assert np.allclose(norms, 1.0, atol=1e-12)


@given(arrays(np.float64, (4, 5), elements=finite))
def test_l2_normalize_idempotent(x):
    once = l2_normalize_rows(x)
    assert np.allclose(l2_normalize_rows(once), once, atol=1e-15, rtol=0)


def test_l2_normalize_backward_matches_fd(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    _, cache = l2_normalize_forward(x)
    analytic = l2_normalize_backward(w, cache)
    numeric = finite_diff_grad(lambda t: float(np.sum(l2_normalize_rows(t.reshape(3, 4)) * w)), x.ravel())
    assert relative_error(analytic.ravel(), numeric).max() < 1e-7


def test_gelu_backward_matches_fd(rng):
    x = rng.normal(size=7) * 2
    analytic = gelu_backward(np.ones(7), gelu_forward(x)[1])
    numeric = finite_diff_grad(lambda t: float(gelu_forward(t)[0].sum()), x)
    assert relative_error(analytic, numeric).max() < 1e-7


# --- param vector ------------------------------------------------------------


def test_param_vector_segments_cover_and_view():
    pv = ParamVector.from_arrays([("a", np.arange(6.0).reshape(2, 3)), ("b", np.ones(4))])
    assert pv.names() == ["a", "b"]
    assert pv.segment("b") == Segment("b", 6, (4,))
    assert np.array_equal(pv["a"], np.arange(6.0).reshape(2, 3))
    pv["b"][:] = 7.0
    assert np.all(pv.data[6:] == 7.0)


def test_param_vector_rejects_gaps_and_overlaps():
    with pytest.raises(DimensionError):
        ParamVector((Segment("a", 0, (2,)), Segment("b", 3, (1,))), np.zeros(4))
    with pytest.raises(DimensionError):
        ParamVector((Segment("a", 0, (2,)),), np.zeros(3))
    with pytest.raises(DimensionError):
        ParamVector((Segment("a", 0, (1,)), Segment("a", 1, (1,))), np.zeros(2))


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3)), min_size=1, max_size=5))
def test_param_vector_flatten_round_trip(shapes):
    arrays_ = [(f"s{i}", np.full(s, float(i))) for i, s in enumerate(shapes)]
    pv = ParamVector.from_arrays(arrays_)
    flat = pv.flatten_grads(dict(arrays_))
    assert np.array_equal(flat, pv.data)
    offsets = [s.offset for s in pv.segments]
    assert offsets == sorted(offsets) and offsets[0] == 0


# --- finite differences ------------------------------------------------------


def test_fd_constant_is_zero():
    assert np.array_equal(finite_diff_grad(lambda t: 3.0, np.array([1.0, -2.0, 0.5])), np.zeros(3))


def test_fd_zero_parameter_model():
    pv = ParamVector.from_arrays([])
    assert finite_diff_grad(lambda p: 1.5, pv).size == 0


def test_fd_quadratic_example():
    g = finite_diff_grad(lambda t: float(t @ t), np.array([1.0, 2.0]), eps=1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_accepts_param_vector():
    pv = ParamVector.from_arrays([("w", np.array([1.0, 2.0])), ("b", np.array([3.0]))])
    g = finite_diff_grad(lambda p: float(p["w"] @ p["w"] + 2 * p["b"][0]), pv)
    assert np.allclose(g, [2.0, 4.0, 2.0], atol=1e-8)


def test_fd_coords_subset():
    g = finite_diff_grad(lambda t: float(t @ t), np.array([1.0, 2.0, 3.0]), coords=[2])
    assert g[0] == 0 and g[1] == 0 and abs(g[2] - 6) < 1e-8


def test_fd_nonfinite_names_coordinate():
    def f(t):
        return math.inf if t[1] > 1.0 else float(t.sum())

    with pytest.raises(OracleError) as info:
        finite_diff_grad(f, np.array([0.0, 1.0]))
    assert info.value.index == 1


def test_fd_rejects_bad_step():
    with pytest.raises(ConfigError):
        finite_diff_grad(lambda t: 0.0, np.zeros(1), eps=0.0)


@given(
    arrays(np.float64, (3, 3), elements=st.floats(-3, 3)),
    arrays(np.float64, 3, elements=st.floats(-3, 3)),
    arrays(np.float64, 3, elements=st.floats(-3, 3)),
)
def test_fd_exact_on_quadratics(a, b, x):
    g = finite_diff_grad(lambda t: float(t @ a @ t + b @ t), x)
    assert np.allclose(g, (a + a.T) @ x + b, atol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5
