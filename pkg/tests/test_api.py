import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vaeconv.api import DeepVAE, LinearVAE
from vaeconv.data import generate, linear_factor
from vaeconv.numerics import RngKey


@pytest.fixture(scope="module")
def X():
    return generate(linear_factor(6, 2, RngKey(0)), 300, RngKey(1))


def test_get_params_and_clone():
    est = LinearVAE(n_components=3, c2=0.5)
    p = est.get_params()
    assert p["n_components"] == 3 and p["c2"] == 0.5
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(beta=2.0)
    assert est.beta == 2.0
    assert "hidden" in DeepVAE().get_params()


def test_linear_fit_transform_shapes(X):
    est = LinearVAE(n_iter=200, learning_rate=0.01)
    Z = est.fit_transform(X)
    assert Z.shape == (300, 2)
    assert est.inverse_transform(Z).shape == X.shape
    assert np.isfinite(est.score(X))
    assert len(est.records_) >= 2 and est.n_features_in_ == 6


def test_linear_training_improves_score(X):
    a = LinearVAE(n_iter=0).fit(X).score(X)
    b = LinearVAE(n_iter=300, learning_rate=0.01).fit(X).score(X)
    assert b > a


def test_fit_is_deterministic(X):
    a = LinearVAE(n_iter=50, random_state=3).fit(X).transform(X)
    b = LinearVAE(n_iter=50, random_state=3).fit(X).transform(X)
    assert np.array_equal(a, b)


def test_deep_fit_transform(X):
    est = DeepVAE(hidden=(4,), n_iter=30, batch_size=8, n_eval_samples=8)
    Z = est.fit(X).transform(X)
    assert Z.shape == (300, 2)
    assert est.inverse_transform(Z).shape == X.shape
    assert np.isfinite(est.score(X[:20]))


def test_validation_errors(X):
    with pytest.raises(NotFittedError):
        LinearVAE().transform(X)
    with pytest.raises(ValueError):
        LinearVAE(batch_size=1000).fit(X)
    with pytest.raises(ValueError):
        LinearVAE().fit(np.array([[1.0, np.nan], [0.0, 1.0]]))
    est = LinearVAE(n_iter=5).fit(X)
    with pytest.raises(ValueError, match="features"):
        est.transform(X[:, :3])
    with pytest.raises(ValueError):
        LinearVAE(n_components=0, n_iter=5).fit(X)
