import numpy as np
import pytest

from vaeconv.activations import Identity
from vaeconv.estimators import ESTIMATORS, draw_noise, iwae_grad, pathwise_grad, score_grad, snr_measure
from vaeconv.gradient import GradEstimate
from vaeconv.mlp import MlpParams
from vaeconv.models import (
    DeepGaussianVae, GaussianTarget, Objective, elbo_deep, elbo_sampled, grad_linear, init_linear, iwae_objective,
    make_deep_vae,
)
from vaeconv.numerics import RngKey, finite_diff_grad

from conftest import rel_err


def small_model(seed=0, act="tanh", objective=None, **kw):
    return make_deep_vae(3, 2, RngKey(seed), enc_hidden=[5], dec_hidden=[4], activation=act, objective=objective,
                         c2=0.5, **kw)


def data(seed, B=3):
    return np.random.default_rng(seed).normal(size=(B, 3))


def _fd_check(m, X, eps, objective, est):
    # the c2 slot is constant in the objective, so finite differences give 0 there too
    fd = finite_diff_grad(lambda v: objective(m.with_flat(v), X, eps), m.flat())
    return rel_err(est.flat, fd)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("act", ["tanh", "softplus", "sigmoid", "celu:1.5"])
def test_pathwise_vs_finite_differences(seed, act):
    m = small_model(seed, act)
    X = data(seed)
    eps = draw_noise(RngKey(seed), 3, 2, 2)
    assert _fd_check(m, X, eps, elbo_deep, pathwise_grad(m, X, 2, eps=eps)) < 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_beta_pathwise_vs_finite_differences(seed):
    m = small_model(seed, objective=Objective("beta", beta=2.5))
    X = data(seed)
    eps = draw_noise(RngKey(seed), 3, 2, 2)
    assert _fd_check(m, X, eps, elbo_deep, pathwise_grad(m, X, 2, eps=eps)) < 1e-5
    assert _fd_check(m, X, eps, elbo_sampled, pathwise_grad(m, X, 2, eps=eps, sampled=True)) < 1e-5


@pytest.mark.parametrize("seed", range(6))
def test_sampled_pathwise_vs_finite_differences(seed):
    m = small_model(seed)
    X = data(seed)
    eps = draw_noise(RngKey(seed), 3, 3, 2)
    assert _fd_check(m, X, eps, elbo_sampled, pathwise_grad(m, X, 3, eps=eps, sampled=True)) < 1e-5


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("K", [1, 4])
def test_iwae_vs_finite_differences(seed, K):
    m = small_model(seed, objective=Objective("iwae", K=K))
    X = data(seed)
    eps = draw_noise(RngKey(seed), 3, K, 2)
    assert _fd_check(m, X, eps, iwae_objective, iwae_grad(m, X, K, eps=eps)) < 1e-5


def test_bbvi_pathwise_vs_finite_differences():
    t = GaussianTarget(np.array([1.0, -0.5]), np.array([[1.0, 0.4], [0.4, 0.8]]))
    m = small_model(1, objective=Objective("bbvi", target=t))
    X = data(1)
    eps = draw_noise(RngKey(1), 3, 2, 2)
    est = pathwise_grad(m, X, 2, eps=eps)
    assert np.all(est.flat_theta == 0)
    assert _fd_check(m, X, eps, elbo_sampled, est) < 1e-5


def test_iwae_k1_identical_to_sampled_pathwise():
    m = small_model(2, objective=Objective("iwae", K=1))
    X = data(2)
    key = RngKey(9)
    a, b = iwae_grad(m, X, 1, key), pathwise_grad(m, X, 1, key, sampled=True)
    assert np.array_equal(a.flat, b.flat)


def test_iwae_equal_weights_is_unweighted_mean():
    # a constant decoder and zero encoder with the prior as q make every weight equal
    d_x, d_z = 3, 2
    enc = MlpParams([np.zeros((2 * d_z, d_x))], [np.zeros(2 * d_z)], [Identity()])
    dec = MlpParams([np.zeros((d_x, d_z))], [np.ones(d_x)], [Identity()])
    m = DeepGaussianVae(dec, enc, 1.0, objective=Objective("iwae", K=5))
    X = data(3, B=2)
    eps = draw_noise(RngKey(3), 2, 5, 2)
    a = iwae_grad(m, X, 5, eps=eps)
    b = pathwise_grad(m, X, 5, eps=eps, sampled=True)
    assert np.allclose(a.flat, b.flat, rtol=1e-12, atol=1e-14)


def test_kl_gradient_vanishes_at_prior():
    d_x, d_z = 3, 2
    enc = MlpParams([np.zeros((2 * d_z, d_x))], [np.zeros(2 * d_z)], [Identity()])
    dec = MlpParams([np.zeros((d_x, d_z))], [np.ones(d_x)], [Identity()])
    m = DeepGaussianVae(dec, enc, 1.0)
    est = pathwise_grad(m, data(4), 3, RngKey(4))
    assert np.all(est.flat_phi == 0)


def test_bookkeeping_b2_k3():
    m = small_model(5)
    for name, fn in ESTIMATORS.items():
        mm = small_model(5, objective=Objective("iwae", K=3)) if name == "iwae" else m
        est = fn(mm, data(5, B=2), 3, RngKey(5))
        assert est.per_sample_terms.shape == (6, m.size)
        assert np.allclose(est.per_sample_terms.mean(axis=0), est.flat, rtol=0, atol=1e-14)
        assert (est.d_theta, est.d_phi) == (m.d_theta, m.d_phi)
        assert est.meta["B"] == 2 and est.meta["K"] == 3
        # the c2 slot carries nothing
        assert np.all(est.per_sample_terms[:, m.decoder.size] == 0)


def test_fixed_key_bit_identical():
    m = small_model(6)
    X = data(6, B=4)
    for name, fn in ESTIMATORS.items():
        mm = small_model(6, objective=Objective("iwae", K=2)) if name == "iwae" else m
        a, b = fn(mm, X, 2, RngKey(1, ("it", 3))), fn(mm, X, 2, RngKey(1, ("it", 3)))
        assert np.array_equal(a.per_sample_terms, b.per_sample_terms)


def test_noise_shape_checked():
    m = small_model(7)
    with pytest.raises(ValueError):
        pathwise_grad(m, data(7), 2, eps=np.zeros((3, 1, 2)))
    with pytest.raises(ValueError):
        pathwise_grad(m, data(7), 0, RngKey(0))
    with pytest.raises(ValueError):
        pathwise_grad(m, data(7), 1)


def _exact_posterior_model():
    # d_z = 1 linear-Gaussian model whose encoder is the exact posterior
    w = np.array([[1.5], [-0.5]])
    c2 = 0.8
    var = 1.0 / (1.0 + float(np.sum(w * w)) / c2)
    A = var * w.T / c2
    enc = MlpParams([np.vstack([A, np.zeros((1, 2))])], [np.array([0.0, np.log(var)])], [Identity()])
    dec = MlpParams([w], [np.zeros(2)], [Identity()])
    return DeepGaussianVae(dec, enc, c2)


def test_score_identity_when_log_weight_constant():
    m = _exact_posterior_model()
    x = np.array([[0.7, 0.2]])
    est = score_grad(m, x, 10**5, RngKey(8))
    lw = est.per_sample_terms[:, m.d_theta:]
    se = lw.std(axis=0) / np.sqrt(lw.shape[0])
    assert np.all(np.abs(est.flat_phi) <= 3 * se + 1e-12)


def test_score_theta_mean_matches_pathwise():
    m = small_model(8)
    x = data(8, B=1)
    s = score_grad(m, x, 10**5, RngKey(10))
    p = pathwise_grad(m, x, 10**5, RngKey(11))
    t_s, t_p = s.per_sample_terms[:, : m.d_theta], p.per_sample_terms[:, : m.d_theta]
    se = np.sqrt(t_s.var(axis=0) / len(t_s) + t_p.var(axis=0) / len(t_p)) + 1e-15
    assert np.max(np.abs(t_s.mean(axis=0) - t_p.mean(axis=0)) / se) < 4.5


def test_snr_rules():
    m = small_model(9)
    X = data(9, B=4)
    with pytest.raises(ValueError, match="30"):
        snr_measure([pathwise_grad(m, X, 1, RngKey(0, ("r", i))) for i in range(29)])
    st, sp = snr_measure([pathwise_grad(m, X, 1, RngKey(0, ("r", i))) for i in range(40)])
    assert 0 < st < np.inf and 0 < sp < np.inf
    lin = init_linear(4, 2, RngKey(0))
    Xl = np.random.default_rng(0).normal(size=(8, 4))
    ests = [grad_linear(lin, Xl) for _ in range(30)]
    assert snr_measure(ests) == (np.inf, np.inf)
    zero = [GradEstimate(np.zeros(2), np.zeros(2), np.zeros((1, 4))) for _ in range(30)]
    assert snr_measure(zero) == (0.0, 0.0)


def test_snr_known_value():
    r = np.random.default_rng(0)
    ests = []
    for _ in range(20000):
        v = np.array([1.0, 2.0]) + r.normal(size=2) * np.array([1.0, 4.0])
        ests.append(GradEstimate(v[:1], v[1:], v[None]))
    st, sp = snr_measure(ests)
    assert abs(st - 1.0) < 0.03 and abs(sp - 0.5) < 0.02


def test_pathwise_variance_scales_with_bk():
    m = small_model(10)
    x = data(10, B=1)[0]
    reps = 1500
    v11 = np.stack([pathwise_grad(m, x[None], 1, RngKey(1, ("a", i))).flat for i in range(reps)]).var(axis=0).sum()
    X4 = np.repeat(x[None], 4, axis=0)
    v44 = np.stack([pathwise_grad(m, X4, 4, RngKey(1, ("b", i))).flat for i in range(reps)]).var(axis=0).sum()
    assert 12 <= v11 / v44 <= 20
