import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vaeconv.numerics import RngKey, as_mat, as_vec, finite_diff_grad, gauss_sample, spectral_norm


def test_gauss_sample_same_key_identical():
    k = RngKey(7, ("eps", 3))
    assert np.array_equal(gauss_sample(k, 5), gauss_sample(k, 5))


def test_gauss_sample_shape_and_finite():
    v = gauss_sample(RngKey(0), 3)
    assert v.shape == (3,) and np.all(np.isfinite(v))


def test_gauss_sample_mean_clt():
    v = gauss_sample(RngKey(1), 10**6)
    assert abs(v.mean()) < 0.01


def test_gauss_sample_rejects_zero_dim():
    with pytest.raises(ValueError):
        gauss_sample(RngKey(0), 0)


def test_keys_independent_of_evaluation_order():
    a = [gauss_sample(RngKey(3).child("batch", i), 4) for i in range(5)]
    b = [gauss_sample(RngKey(3).child("batch", i), 4) for i in reversed(range(5))][::-1]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_string_and_int_labels_differ():
    assert not np.array_equal(gauss_sample(RngKey(0, ("a",)), 3), gauss_sample(RngKey(0, (0,)), 3))


def test_rngkey_rejects_negative_seed():
    with pytest.raises(ValueError):
        RngKey(-1)


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: x[0] ** 2, np.array([3.0]), h=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_finite_diff_constant_is_zero():
    assert np.all(finite_diff_grad(lambda x: 4.2, np.ones(4)) == 0.0)


def test_finite_diff_reports_probe_point():
    with pytest.raises(FloatingPointError, match=r"x\[1\]"):
        finite_diff_grad(lambda x: 1.0 if x[1] > 0 else np.inf, np.array([1.0, 1e-4]), h=1e-3)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.ones(2), h=0.0)


@given(st.integers(0, 10_000))
def test_finite_diff_quadratic_form(seed):
    r = np.random.default_rng(seed)
    M = r.normal(size=(4, 4))
    A = M + M.T
    x = r.uniform(-10, 10, size=4) / np.sqrt(4)
    g = finite_diff_grad(lambda v: 0.5 * v @ A @ v, x)
    ax = A @ x
    assert np.linalg.norm(g - ax) <= 1e-6 * max(np.linalg.norm(ax), 1.0)


@given(st.integers(0, 10_000))
def test_spectral_norm_matches_gram_eigen(seed):
    M = np.random.default_rng(seed).normal(size=(3, 3))
    brute = np.sqrt(np.max(np.linalg.eigvalsh(M.T @ M)))
    assert spectral_norm(M, max_iter=10_000) >= 0
    assert abs(spectral_norm(M, max_iter=10_000) - brute) <= 1e-10 * max(brute, 1.0)


def test_spectral_norm_special_cases():
    assert spectral_norm(np.zeros((2, 3))) == 0.0
    assert spectral_norm(np.array([3.0, 4.0])) == 5.0
    assert abs(spectral_norm(np.diag([1.0, -7.0, 2.0])) - 7.0) < 1e-12
    assert abs(spectral_norm(np.ones((2, 5))) - np.sqrt(10)) < 1e-12


def test_as_vec_and_as_mat_validation():
    assert as_vec([1, 2]).dtype == np.float64
    with pytest.raises(ValueError):
        as_vec([])
    with pytest.raises(ValueError):
        as_vec([np.nan])
    with pytest.raises(ValueError):
        as_mat(np.ones(3))
