import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfl.core_math import affine, finite_diff_grad, make_rng, relu, sigmoid, singular_values, standard_normal, svd_rank1
from pfl.errors import NumericError, ShapeError



def power_iteration_rank1(M, iters=5000, tol=1e-15):
    """Independent oracle: leading singular triple by power iteration on M^T M."""
    v = np.ones(M.shape[1]) / np.sqrt(M.shape[1])
    for _ in range(iters):
        w = M.T @ (M @ v)
        w /= np.linalg.norm(w)
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    s = np.linalg.norm(M @ v)
    u = M @ v / s
    return u, s, v, s * np.outer(u, v)


def test_affine_examples():
    assert np.array_equal(affine(np.eye(2), np.zeros(2), np.array([3.0, -1.0])), [3.0, -1.0])
    assert np.array_equal(affine(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([1.0, 0.0]), np.ones(2)), [4.0, 1.0])
    assert np.array_equal(affine(np.zeros((1, 3)), np.array([5.0]), np.array([7.0, -2.0, 0.5])), [5.0])


def test_affine_shape_errors():
    with pytest.raises(ShapeError):
        affine(np.eye(2), np.zeros(2), np.ones(3))
    with pytest.raises(ShapeError):
        affine(np.eye(2), np.zeros(3), np.ones(2))


def test_relu_examples():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.array_equal(relu(-np.arange(1.0, 5.0)), np.zeros(4))
    x = np.arange(1.0, 5.0)
    assert np.array_equal(relu(x), x)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)))
def test_sigmoid_stable_and_bounded(x):
    y = sigmoid(x)
    assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(y + sigmoid(-x), 1.0, atol=1e-15)


def test_standard_normal_monte_carlo():
    z = standard_normal(make_rng(3), 100_000)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.03


def test_standard_normal_deterministic():
    assert np.array_equal(standard_normal(make_rng(9), 50), standard_normal(make_rng(9), 50))
    assert not np.array_equal(standard_normal(make_rng(9), 50), standard_normal(make_rng(10), 50))


def test_rng_streams_are_distinct():
    a = make_rng(7, 1).standard_normal(20)
    b = make_rng(7, 2).standard_normal(20)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, make_rng(7, 1).standard_normal(20))


def test_svd_rank1_diagonal():
    u, s, v, M1 = svd_rank1(np.diag([3.0, 1.0]))
    assert s == pytest.approx(3.0)
    np.testing.assert_allclose(M1, np.diag([3.0, 0.0]), atol=1e-15)


def test_svd_rank1_already_rank_one():
    M = np.outer([1.0, 0.0], [0.0, 1.0])
    _, s, _, M1 = svd_rank1(M)
    assert s == pytest.approx(1.0)
    np.testing.assert_allclose(M1, M, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_svd_rank1_matches_power_iteration(seed):
    M = make_rng(seed).standard_normal((8, 8))
    _, s, v, M1 = svd_rank1(M)
    _, s_o, v_o, M1_o = power_iteration_rank1(M)
    assert abs(np.linalg.norm(M - M1) - np.linalg.norm(M - M1_o)) < 1e-8
    assert abs(s - s_o) < 1e-8
    assert abs(abs(v @ v_o) - 1.0) < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_svd_rank1_is_best_rank_one(seed):
    r = make_rng(100 + seed)
    M = r.standard_normal((6, 5))
    _, _, _, M1 = svd_rank1(M)
    best = np.linalg.norm(M - M1)
    for _ in range(100):
        R = np.outer(r.standard_normal(6), r.standard_normal(5))
        assert best <= np.linalg.norm(M - R)


def test_svd_errors():
    with pytest.raises(ShapeError):
        svd_rank1(np.zeros((0, 3)))
    with pytest.raises(NumericError):
        svd_rank1(np.array([[np.nan, 1.0]]))


def test_singular_values_sorted():
    s = singular_values(make_rng(4).standard_normal((5, 7)))
    assert np.all(np.diff(s) <= 0)


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda t: float(t @ t), np.array([1.0, 2.0])), [2.0, 4.0], atol=1e-6)
    assert np.array_equal(finite_diff_grad(lambda t: 3.0, np.array([1.0, -2.0, 0.5])), np.zeros(3))
    g = finite_diff_grad(lambda t: float(relu(t)[0]), np.array([1.0]))
    assert abs(g[0] - 1.0) < 1e-6


def test_finite_diff_rejects_bad_step_and_nan():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: 0.0, np.zeros(2), h=1e-2)
    with pytest.raises(NumericError):
        finite_diff_grad(lambda t: float("nan"), np.zeros(2))


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 5)))
def test_finite_diff_on_smooth_function(theta):
    A = np.arange(1.0, theta.size + 1)
    f = lambda t: float(np.sin(t) @ A + 0.5 * t @ t)
    np.testing.assert_allclose(finite_diff_grad(f, theta), np.cos(theta) * A + theta, atol=1e-7)
