"""scikit-learn style estimators wrapping the training loop.

``fit`` trains on an array, ``transform`` returns encoder means,
``inverse_transform`` decoder means and ``score`` the mean ELBO.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import load_config
from .mlp import forward
from .models import elbo_deep, elbo_linear, encode
from .numerics import RngKey, gauss_sample
from .runner import run


class _VaeEstimator(TransformerMixin, BaseEstimator):
    _family = ""

    def _config(self, d_x: int) -> dict:
        raise NotImplementedError

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X.shape[0] < self.batch_size:
            raise ValueError(f"batch_size={self.batch_size} exceeds the {X.shape[0]} rows")
        cfg = load_config(self._config(X.shape[1]))
        res = run(cfg, data=(X, X[:0]))
        self.model_ = res.extra["problem"].model
        self.records_ = res.records
        self.summary_ = res.summary
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return X


class LinearVAE(_VaeEstimator):
    """Linear Gaussian VAE trained with analytic gradients and Adam or SGD."""

    def __init__(self, n_components=2, c2=1.0, beta=1.0, optimizer="adam", learning_rate=0.001,
                 batch_size=32, n_iter=1000, init_scale=0.1, random_state=0):
        self.n_components = n_components
        self.c2 = c2
        self.beta = beta
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.init_scale = init_scale
        self.random_state = random_state

    def _config(self, d_x):
        return {
            "model": {"family": "linear", "d_x": d_x, "d_z": self.n_components, "c2": self.c2, "init_scale": self.init_scale},
            "objective": {"kind": "elbo" if self.beta == 1.0 else "beta", "beta": float(self.beta)},
            "optim": {"kind": self.optimizer, "C_gamma": self.learning_rate},
            "data": {"seed": int(self.random_state), "test_frac": 0.0},
            "train": {"iterations": self.n_iter, "B": self.batch_size},
            "diag": {"eval_every": max(1, self.n_iter), "snr_reps": 0, "bounds": False},
        }

    def transform(self, X):
        X = self._check(X)
        return X @ self.model_.W2.T + self.model_.b2

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=np.float64)
        return Z @ self.model_.W1.T + self.model_.b1

    def score(self, X, y=None):
        X = self._check(X)
        return elbo_linear(self.model_, X, self.beta)


class DeepVAE(_VaeEstimator):
    """Deep Gaussian VAE with clamped heads, trained with a stochastic gradient estimator."""

    def __init__(self, n_components=2, hidden=(16,), activation="tanh", c2=1.0, objective="elbo", beta=1.0, K=1,
                 estimator="pathwise", optimizer="adam", learning_rate=0.001, batch_size=32, n_iter=1000,
                 n_eval_samples=64, random_state=0):
        self.n_components = n_components
        self.hidden = hidden
        self.activation = activation
        self.c2 = c2
        self.objective = objective
        self.beta = beta
        self.K = K
        self.estimator = estimator
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.n_eval_samples = n_eval_samples
        self.random_state = random_state

    def _config(self, d_x):
        return {
            "model": {"family": "deep", "d_x": d_x, "d_z": self.n_components, "enc_hidden": list(self.hidden),
                      "dec_hidden": list(self.hidden), "activation": self.activation, "c2": self.c2},
            "objective": {"kind": self.objective, "beta": float(self.beta), "K": int(self.K)},
            "estimator": self.estimator,
            "optim": {"kind": self.optimizer, "C_gamma": self.learning_rate},
            "data": {"seed": int(self.random_state), "test_frac": 0.0},
            "train": {"iterations": self.n_iter, "B": self.batch_size},
            "diag": {"eval_every": max(1, self.n_iter), "eval_mc": self.n_eval_samples, "snr_reps": 0, "bounds": False},
        }

    def transform(self, X):
        X = self._check(X)
        return encode(self.model_, X).mu

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=np.float64)
        return np.atleast_2d(forward(self.model_.decoder, Z)[0])

    def score(self, X, y=None):
        X = self._check(X)
        eps = gauss_sample(RngKey(int(self.random_state)).child("score"), (X.shape[0], self.n_eval_samples, self.n_components))
        return elbo_deep(self.model_, X, eps)
