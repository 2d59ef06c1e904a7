"""Linear and deep Gaussian VAEs, objective descriptors, BBVI targets and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .activations import Activation, SoftClip, Identity, act, act_d1
from .gradient import GradEstimate
from .mlp import MlpParams, forward, init as init_mlp
from .numerics import RngKey

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# objectives and BBVI targets


class DegenerateWeightsError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GaussianTarget:
    """log N(z; mean, cov), independent of x."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_prec", np.linalg.inv(cov))
        object.__setattr__(self, "_logdet", float(np.linalg.slogdet(cov)[1]))

    def log_density(self, x, z):
        d = np.asarray(z) - self.mean
        quad = np.einsum("...i,ij,...j->...", d, self._prec, d)
        return -0.5 * (quad + self._logdet + self.mean.size * LOG_2PI)

    def grad_z(self, x, z):
        return -(np.asarray(z) - self.mean) @ self._prec

    def smoothness(self) -> float | None:
        return float(np.linalg.eigvalsh(self._prec).max())

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class GaussianMixtureTarget:
    """Isotropic Gaussian mixture sum_j w_j N(z; mean_j, std_j^2 I)."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sd = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), w.shape).copy()
        if mu.shape[0] != w.size or np.any(w <= 0) or np.any(sd <= 0):
            raise ValueError("mixture needs positive weights and stds, one mean per component")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    def _comp(self, z):
        z = np.asarray(z, dtype=np.float64)
        d = z[..., None, :] - self.means
        dim = self.means.shape[1]
        var = self.stds**2
        lp = (
            np.log(self.weights)
            - 0.5 * np.sum(d * d, axis=-1) / var
            - 0.5 * dim * (LOG_2PI + np.log(var))
        )
        return lp, d, var

    def log_density(self, x, z):
        lp, _, _ = self._comp(z)
        return logsumexp(lp, axis=-1)

    def grad_z(self, x, z):
        lp, d, var = self._comp(z)
        r = np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))
        return -np.einsum("...j,...jd->...d", r / var, d)

    def smoothness(self) -> float | None:
        return None

    def to_dict(self) -> dict:
        return {
            "kind": "mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }


@dataclass(frozen=True)
class BananaTarget:
    """Two-dimensional banana: z1 ~ N(0, scale^2), z2 | z1 ~ N(curvature (z1^2 - scale^2), 1)."""

    curvature: float = 0.5
    scale: float = 2.0

    def log_density(self, x, z):
        z = np.asarray(z, dtype=np.float64)
        z1, z2 = z[..., 0], z[..., 1]
        r = z2 - self.curvature * (z1 * z1 - self.scale**2)
        return -0.5 * (z1 / self.scale) ** 2 - 0.5 * r * r - LOG_2PI - np.log(self.scale)

    def grad_z(self, x, z):
        z = np.asarray(z, dtype=np.float64)
        z1, z2 = z[..., 0], z[..., 1]
        r = z2 - self.curvature * (z1 * z1 - self.scale**2)
        g1 = -z1 / self.scale**2 + 2.0 * self.curvature * z1 * r
        return np.stack([g1, -r], axis=-1)

    def smoothness(self) -> float | None:
        return None

    def to_dict(self) -> dict:
        return {"kind": "banana", "curvature": self.curvature, "scale": self.scale}


def target_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "gaussian":
        return GaussianTarget(d["mean"], d["cov"])
    if kind == "mixture":
        return GaussianMixtureTarget(d["weights"], d["means"], d["stds"])
    if kind == "banana":
        return BananaTarget(float(d.get("curvature", 0.5)), float(d.get("scale", 2.0)))
    raise ValueError(f"unknown target kind {kind!r}")


OBJECTIVE_KINDS = ("elbo", "beta", "iwae", "bbvi")


@dataclass(frozen=True)
class Objective:
    """Which bound is maximised. ``bbvi`` freezes the decoder and uses ``target`` as log p(x, z)."""

    kind: str = "elbo"
    beta: float = 1.0
    K: int = 1
    target: object = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if self.kind == "bbvi" and self.target is None:
            raise ValueError("bbvi needs a target log-density")
        if self.kind != "beta" and self.beta != 1.0:
            raise ValueError("beta != 1 requires the 'beta' objective")

    @property
    def effective_beta(self) -> float:
        return self.beta if self.kind == "beta" else 1.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "beta": self.beta, "K": int(self.K)}
        if self.target is not None:
            d["target"] = self.target.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Objective":
        target = target_from_dict(d["target"]) if d.get("target") else None
        return cls(d.get("kind", "elbo"), float(d.get("beta", 1.0)), int(d.get("K", 1)), target)


# ---------------------------------------------------------------------------
# Linear VAE


@dataclass(frozen=True)
class LinearVae:
    """p(z)=N(0,I), p(x|z)=N(W1 z + b1, c2 I), q(z|x)=N(W2 x + b2, diag(D)).

    ``c2`` is a fixed hyperparameter. D is kept above ``c_D``.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    D: np.ndarray
    c2: float = 1.0
    c_D: float = 1e-4

    def __post_init__(self):
        W1 = np.asarray(self.W1, dtype=np.float64)
        W2 = np.asarray(self.W2, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1)
        D = np.asarray(self.D, dtype=np.float64).reshape(-1)
        dx, dz = W1.shape
        if W2.shape != (dz, dx) or b1.size != dx or b2.size != dz or D.size != dz:
            raise ValueError("inconsistent Linear VAE shapes")
        if not self.c2 > 0 or not self.c_D > 0:
            raise ValueError("c2 and c_D must be positive")
        for name, v in (("W1", W1), ("W2", W2), ("b1", b1), ("b2", b2), ("D", D)):
            object.__setattr__(self, name, v)

    @property
    def d_x(self) -> int:
        return self.W1.shape[0]

    @property
    def d_z(self) -> int:
        return self.W1.shape[1]

    @property
    def d_theta(self) -> int:
        return self.W1.size + self.b1.size

    @property
    def size(self) -> int:
        return self.d_theta + self.W2.size + self.b2.size + self.D.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2, self.D])

    def with_flat(self, vec) -> "LinearVae":
        vec = np.asarray(vec, dtype=np.float64)
        dx, dz = self.d_x, self.d_z
        cuts = np.cumsum([dx * dz, dx, dz * dx, dz])
        W1, b1, W2, b2, D = np.split(vec, cuts)
        return replace(self, W1=W1.reshape(dx, dz), b1=b1, W2=W2.reshape(dz, dx), b2=b2, D=D)

    def opt_flat(self) -> np.ndarray:
        """Unconstrained coordinates: D enters through its logarithm."""
        v = self.flat()
        v[-self.d_z:] = np.log(self.D)
        return v

    def with_opt_flat(self, vec) -> "LinearVae":
        v = np.array(vec, dtype=np.float64)
        v[-self.d_z:] = np.maximum(np.exp(v[-self.d_z:]), self.c_D)
        return self.with_flat(v)

    def opt_grad(self, grad) -> np.ndarray:
        """Chain rule from a gradient in D to a gradient in log D."""
        g = np.array(grad, dtype=np.float64)
        g[-self.d_z:] *= self.D
        return g


def init_linear(d_x: int, d_z: int, key: RngKey, c2: float = 1.0, scale: float = 0.1, c_D: float = 1e-4) -> LinearVae:
    rng = key.generator()
    return LinearVae(
        W1=scale * rng.standard_normal((d_x, d_z)),
        b1=np.zeros(d_x),
        W2=scale * rng.standard_normal((d_z, d_x)),
        b2=np.zeros(d_z),
        D=np.ones(d_z),
        c2=c2,
        c_D=c_D,
    )


def _rows(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"expected inputs of width {d}, got shape {x.shape}")
    return X, single


def linear_terms(m: LinearVae, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-row closed-form reconstruction term and KL(q || prior)."""
    X, _ = _rows(x, m.d_x)
    mean = X @ m.W2.T + m.b2
    resid = X - m.b1 - mean @ m.W1.T
    trace_term = float(np.sum(m.D * np.sum(m.W1 * m.W1, axis=0)))
    recon = -(trace_term + np.sum(resid * resid, axis=1)) / (2.0 * m.c2) - 0.5 * m.d_x * np.log(2 * np.pi * m.c2)
    kl = 0.5 * (-np.sum(np.log(m.D)) + np.sum(mean * mean, axis=1) + np.sum(m.D) - m.d_z)
    return recon, kl


def elbo_linear(m: LinearVae, x, beta: float = 1.0) -> float:
    """Closed-form (beta-)ELBO; for a batch of rows, the batch mean."""
    recon, kl = linear_terms(m, x)
    return float(np.mean(recon - beta * kl))


def _check_floor(m: LinearVae):
    if np.any(m.D < m.c_D):
        raise ValueError(f"D entry below floor c_D={m.c_D}: min {m.D.min()}")


def linear_grad_terms(m: LinearVae, x, beta: float = 1.0) -> np.ndarray:
    """Per-row analytic gradients in ``LinearVae.flat`` order, shape (rows, size)."""
    _check_floor(m)
    X, _ = _rows(x, m.d_x)
    n = X.shape[0]
    mean = X @ m.W2.T + m.b2
    resid = X - m.b1 - mean @ m.W1.T
    c2 = m.c2
    gW1 = (np.einsum("ni,nj->nij", resid, mean) - (m.W1 * m.D)[None]) / c2
    gb1 = resid / c2
    back = resid @ m.W1 / c2 - beta * mean
    gW2 = np.einsum("ni,nj->nij", back, X)
    gD = 0.5 * (beta * (1.0 / m.D - 1.0) - np.sum(m.W1 * m.W1, axis=0) / c2)
    return np.concatenate(
        [gW1.reshape(n, -1), gb1, gW2.reshape(n, -1), back, np.broadcast_to(gD, (n, m.d_z))], axis=1
    )


def grad_linear(m: LinearVae, x, beta: float = 1.0) -> GradEstimate:
    """Exact batch-mean ELBO gradient (no Monte Carlo)."""
    terms = linear_grad_terms(m, x, beta)
    return GradEstimate.from_terms(terms, m.d_theta, B=terms.shape[0], K=1, estimator="analytic")


def _linear_moment_pieces(m: LinearVae, mean_x, second_x):
    mu = np.asarray(mean_x, dtype=np.float64)
    S = np.asarray(second_x, dtype=np.float64)
    A = m.W2
    P = np.eye(m.d_x) - m.W1 @ A
    q = m.b1 + m.W1 @ m.b2
    return mu, S, A, P, q


def elbo_linear_moments(m: LinearVae, mean_x, second_x, beta: float = 1.0) -> float:
    """Population ELBO from E[x] and E[x x^T]; the ELBO is quadratic in x."""
    mu, S, A, P, q = _linear_moment_pieces(m, mean_x, second_x)
    e_r2 = np.trace(P @ S @ P.T) - 2.0 * q @ P @ mu + q @ q
    e_m2 = np.trace(A @ S @ A.T) + 2.0 * m.b2 @ A @ mu + m.b2 @ m.b2
    trace_term = float(np.sum(m.D * np.sum(m.W1 * m.W1, axis=0)))
    recon = -(trace_term + e_r2) / (2.0 * m.c2) - 0.5 * m.d_x * np.log(2 * np.pi * m.c2)
    kl = 0.5 * (-np.sum(np.log(m.D)) + e_m2 + np.sum(m.D) - m.d_z)
    return float(recon - beta * kl)


def grad_linear_moments(m: LinearVae, mean_x, second_x, beta: float = 1.0) -> np.ndarray:
    """Population gradient in ``LinearVae.flat`` order from E[x] and E[x x^T]."""
    _check_floor(m)
    mu, S, A, P, q = _linear_moment_pieces(m, mean_x, second_x)
    c2 = m.c2
    b2 = m.b2
    e_rm = P @ S @ A.T + np.outer(P @ mu, b2) - np.outer(q, A @ mu) - np.outer(q, b2)
    e_rx = P @ S - np.outer(q, mu)
    e_mx = A @ S + np.outer(b2, mu)
    e_r = P @ mu - q
    e_m = A @ mu + b2
    gW1 = (e_rm - m.W1 * m.D) / c2
    gb1 = e_r / c2
    gW2 = m.W1.T @ e_rx / c2 - beta * e_mx
    gb2 = m.W1.T @ e_r / c2 - beta * e_m
    gD = 0.5 * (beta * (1.0 / m.D - 1.0) - np.sum(m.W1 * m.W1, axis=0) / c2)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gD])


def linear_optimum(cov_x: np.ndarray, mean_x: np.ndarray, d_z: int, c2: float):
    """Maximiser of the population ELBO (beta = 1): the pPCA solution with fixed noise c2.

    Returns the parameters with latent directions ordered by decreasing variance.
    """
    evals, evecs = np.linalg.eigh(cov_x)
    order = np.argsort(evals)[::-1][:d_z]
    lam = evals[order]
    U = evecs[:, order]
    scale = np.sqrt(np.maximum(lam - c2, 0.0))
    W1 = U * scale
    M = W1.T @ W1 + c2 * np.eye(d_z)
    W2 = np.linalg.solve(M, W1.T)
    D = 1.0 / (1.0 + np.sum(W1 * W1, axis=0) / c2)
    b1 = np.asarray(mean_x, dtype=np.float64)
    b2 = -W2 @ b1
    return W1, b1, W2, b2, D


# ---------------------------------------------------------------------------
# Deep Gaussian VAE


@dataclass(frozen=True)
class Clamps:
    C_mu: float = 10.0
    C_G: float = 10.0
    c_Sigma: float = 1e-3
    C_Sigma: float = 10.0
    s: float = 5.0

    def __post_init__(self):
        if not (self.C_mu > 0 and self.C_G > 0 and self.s > 0):
            raise ValueError("clamps C_mu, C_G and s must be positive")
        if not 0 < self.c_Sigma <= self.C_Sigma:
            raise ValueError("need 0 < c_Sigma <= C_Sigma")


@dataclass(frozen=True)
class DeepGaussianVae:
    """Decoder mean G(z) with fixed noise c2; encoder emitting raw (mu, log-variance) heads.

    ``mean_head`` and ``logvar_head`` are the bounded activations applied to the two
    halves of the encoder output. ``None`` leaves a head unclamped; that is only
    used by exactness tests, since the bound calculators need the clamps.
    """

    decoder: MlpParams
    encoder: MlpParams
    c2: float = 1.0
    clamps: Clamps = field(default_factory=Clamps)
    mean_head: Activation | None = None
    logvar_head: Activation | None = None
    objective: Objective = field(default_factory=Objective)

    def __post_init__(self):
        if not self.c2 > 0:
            raise ValueError("c2 must be positive")
        if self.encoder.d_out % 2:
            raise ValueError("encoder must emit 2 * d_z values")
        if self.encoder.d_out // 2 != self.decoder.d_in:
            raise ValueError("encoder latent width does not match decoder input")

    @property
    def d_x(self) -> int:
        return self.decoder.d_out

    @property
    def d_z(self) -> int:
        return self.decoder.d_in

    @property
    def d_theta(self) -> int:
        # decoder weights plus the fixed-c2 slot
        return self.decoder.size + 1

    @property
    def d_phi(self) -> int:
        return self.encoder.size

    @property
    def size(self) -> int:
        return self.d_theta + self.d_phi

    def flat(self) -> np.ndarray:
        return np.concatenate([self.decoder.flat(), [self.c2], self.encoder.flat()])

    def with_flat(self, vec) -> "DeepGaussianVae":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {vec.shape}")
        nd = self.decoder.size
        return replace(
            self,
            decoder=self.decoder.with_flat(vec[:nd]),
            encoder=self.encoder.with_flat(vec[nd + 1:]),
        )

    @property
    def clamped(self) -> bool:
        return self.mean_head is not None and self.logvar_head is not None and (
            self.decoder.activations[-1].kind == "softclip"
        )


def default_heads(d_z: int, clamps: Clamps) -> tuple[Activation, Activation]:
    r = clamps.C_mu / np.sqrt(d_z)
    return (
        SoftClip(-r, r, clamps.s),
        SoftClip(float(np.log(clamps.c_Sigma)), float(np.log(clamps.C_Sigma)), clamps.s),
    )


def make_deep_vae(
    d_x: int,
    d_z: int,
    key: RngKey,
    enc_hidden=(16,),
    dec_hidden=(16,),
    activation: Activation | str = "tanh",
    c2: float = 1.0,
    clamps: Clamps | None = None,
    bound: float | None = None,
    objective: Objective | None = None,
) -> DeepGaussianVae:
    """Deep Gaussian VAE with clamped decoder output and clamped encoder heads."""
    if isinstance(activation, str):
        activation = Activation.parse(activation)
    clamps = clamps or Clamps()
    r = clamps.C_G / np.sqrt(d_x)
    dec_dims = [d_z, *dec_hidden, d_x]
    dec_acts = [activation] * len(dec_hidden) + [SoftClip(-r, r, clamps.s)]
    enc_dims = [d_x, *enc_hidden, 2 * d_z]
    enc_acts = [activation] * len(enc_hidden) + [Identity()]
    decoder = init_mlp(dec_dims, dec_acts, key.child("decoder"), bound)
    encoder = init_mlp(enc_dims, enc_acts, key.child("encoder"), bound)
    mh, lh = default_heads(d_z, clamps)
    return DeepGaussianVae(decoder, encoder, c2, clamps, mh, lh, objective or Objective())


@dataclass
class EncoderPass:
    """Encoder evaluation on a batch of rows, with what the gradients need."""

    trace: object
    raw: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    dmu_raw: np.ndarray
    dlogvar_raw: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


def _head(h: Activation | None, x):
    if h is None:
        return x, np.ones_like(x)
    return act(h, x), act_d1(h, x)


def encode(m: DeepGaussianVae, X) -> EncoderPass:
    out, trace = forward(m.encoder, X)
    out = np.atleast_2d(out)
    dz = m.d_z
    mu, dmu = _head(m.mean_head, out[:, :dz])
    lv, dlv = _head(m.logvar_head, out[:, dz:])
    return EncoderPass(trace, out, mu, lv, dmu, dlv)


def _batch_noise(X: np.ndarray, single: bool, eps, d_z: int) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if single and eps.ndim == 2:
        eps = eps[None]
    if eps.ndim == 1:
        eps = eps[None, None, :]
    if eps.ndim != 3 or eps.shape[0] != X.shape[0] or eps.shape[2] != d_z:
        raise ValueError(f"noise shape {eps.shape} does not match batch {X.shape} and d_z={d_z}")
    return eps


def log_lik(m: DeepGaussianVae, x, z):
    """log N(x; G(z), c2 I), row-wise."""
    G, _ = forward(m.decoder, z)
    r = np.asarray(x) - G
    return -0.5 * np.sum(r * r, axis=-1) / m.c2 - 0.5 * m.d_x * np.log(2 * np.pi * m.c2)


def log_prior(z):
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def log_joint(m: DeepGaussianVae, x, z):
    """log p(x, z); under a BBVI objective this is the frozen target density."""
    if m.objective.kind == "bbvi":
        return m.objective.target.log_density(x, z)
    return log_lik(m, x, z) + log_prior(z)


def log_q(m: DeepGaussianVae, x, z):
    """log q(z | x) for the diagonal Gaussian encoder, row-wise."""
    X, single = _rows(x, m.d_x)
    e = encode(m, X)
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d = Z - e.mu
    val = -0.5 * np.sum(d * d * np.exp(-e.logvar) + e.logvar + LOG_2PI, axis=1)
    return float(val[0]) if single and np.ndim(z) == 1 else val


def gaussian_kl(mu, logvar):
    """KL(N(mu, diag e^logvar) || N(0, I)), row-wise."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)


def _reparam(m: DeepGaussianVae, x, eps):
    X, single = _rows(x, m.d_x)
    eps = _batch_noise(X, single, eps, m.d_z)
    e = encode(m, X)
    z = e.mu[:, None, :] + e.sigma[:, None, :] * eps
    return X, e, eps, z


def elbo_deep(m: DeepGaussianVae, x, eps, beta: float | None = None) -> float:
    """Monte Carlo reconstruction over the given noise plus the closed-form -beta KL.

    ``x`` is one row with ``eps`` of shape (K, d_z), or a batch with (B, K, d_z);
    the batch mean is returned.
    """
    beta = m.objective.effective_beta if beta is None else beta
    X, e, eps, z = _reparam(m, x, eps)
    B, K, dz = z.shape
    ll = log_lik(m, np.repeat(X, K, axis=0), z.reshape(B * K, dz)).reshape(B, K)
    return float(np.mean(ll.mean(axis=1) - beta * gaussian_kl(e.mu, e.logvar)))


def log_weights(m: DeepGaussianVae, x, eps, beta: float = 1.0) -> np.ndarray:
    """log w = log p(x, z) - log q(z | x) at z = mu + sigma * eps, shape (B, K).

    With ``beta`` != 1 the prior and entropy parts are scaled, giving the
    fully sampled beta-ELBO integrand.
    """
    X, e, eps, z = _reparam(m, x, eps)
    B, K, dz = z.shape
    zr = z.reshape(B * K, dz)
    Xr = np.repeat(X, K, axis=0)
    lq = (-0.5 * np.sum(eps * eps + e.logvar[:, None, :] + LOG_2PI, axis=2)).reshape(-1)
    if m.objective.kind == "bbvi":
        lj = m.objective.target.log_density(Xr, zr)
        return (lj - lq).reshape(B, K)
    return (log_lik(m, Xr, zr) + beta * (log_prior(zr) - lq)).reshape(B, K)


def elbo_sampled(m: DeepGaussianVae, x, eps, beta: float | None = None) -> float:
    """Fully sampled ELBO estimate: mean of log w over the noise (and the batch)."""
    beta = m.objective.effective_beta if beta is None else beta
    return float(np.mean(log_weights(m, x, eps, beta)))


def log_mean_exp(lw, axis=-1):
    lw = np.asarray(lw, dtype=np.float64)
    top = np.max(lw, axis=axis, keepdims=True)
    if np.any(np.isneginf(top)):
        raise DegenerateWeightsError("degenerate importance weights: all log-weights are -inf")
    out = top + np.log(np.mean(np.exp(lw - top), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def iwae_objective(m: DeepGaussianVae, x, eps) -> float:
    """log (1/K) sum_l w_l per row, averaged over the batch."""
    lw = log_weights(m, x, eps)
    if np.any(np.isnan(lw)):
        raise DegenerateWeightsError("NaN log-weights")
    return float(np.mean(log_mean_exp(lw, axis=1)))


def density_bound_alpha(m: DeepGaussianVae, x, z):
    """A bound alpha(x, z) on max(|log p(x, z)|, |log q(z | x)|) implied by the clamps.

    Absolute values are taken on the log-normaliser terms, the likelihood normaliser
    uses d_x, and the prior term of log p(x, z) is included.
    """
    if not m.clamped:
        raise ValueError("alpha needs the clamped architecture")
    c = m.clamps
    nx = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    nz = np.linalg.norm(np.asarray(z, dtype=np.float64), axis=-1)
    dz, dx = m.d_z, m.d_x
    q_part = 0.5 * dz * max(abs(np.log(2 * np.pi * c.C_Sigma)), abs(np.log(2 * np.pi * c.c_Sigma))) + (
        nz**2 + c.C_mu**2
    ) / c.c_Sigma
    p_part = (
        0.5 * dx * abs(np.log(2 * np.pi * m.c2))
        + (nx**2 + c.C_G**2) / m.c2
        + 0.5 * dz * LOG_2PI
        + 0.5 * nz**2
    )
    return np.maximum(q_part, p_part)


# ---------------------------------------------------------------------------
# checkpoints


def _mlp_to_dict(p: MlpParams) -> dict:
    return {
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
        "activations": [f.spec() for f in p.activations],
        "bound": p.bound,
    }


def _mlp_from_dict(d: dict) -> MlpParams:
    return MlpParams(
        tuple(np.array(w, dtype=np.float64) for w in d["weights"]),
        tuple(np.array(b, dtype=np.float64) for b in d["biases"]),
        tuple(Activation.parse(a) for a in d["activations"]),
        d["bound"],
    )


CHECKPOINT_VERSION = 1


def model_to_dict(m) -> dict:
    if isinstance(m, LinearVae):
        return {
            "version": CHECKPOINT_VERSION,
            "family": "linear",
            "W1": m.W1.tolist(),
            "b1": m.b1.tolist(),
            "W2": m.W2.tolist(),
            "b2": m.b2.tolist(),
            "D": m.D.tolist(),
            "c2": m.c2,
            "c_D": m.c_D,
        }
    if isinstance(m, DeepGaussianVae):
        c = m.clamps
        return {
            "version": CHECKPOINT_VERSION,
            "family": "deep",
            "decoder": _mlp_to_dict(m.decoder),
            "encoder": _mlp_to_dict(m.encoder),
            "c2": m.c2,
            "clamps": {"C_mu": c.C_mu, "C_G": c.C_G, "c_Sigma": c.c_Sigma, "C_Sigma": c.C_Sigma, "s": c.s},
            "mean_head": m.mean_head.spec() if m.mean_head else None,
            "logvar_head": m.logvar_head.spec() if m.logvar_head else None,
            "objective": m.objective.to_dict(),
        }
    raise TypeError(f"cannot serialise {type(m).__name__}")


def model_from_dict(d: dict):
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    if d["family"] == "linear":
        return LinearVae(
            np.array(d["W1"]), np.array(d["b1"]), np.array(d["W2"]), np.array(d["b2"]),
            np.array(d["D"]), d["c2"], d["c_D"],
        )
    if d["family"] == "deep":
        return DeepGaussianVae(
            _mlp_from_dict(d["decoder"]),
            _mlp_from_dict(d["encoder"]),
            d["c2"],
            Clamps(**d["clamps"]),
            Activation.parse(d["mean_head"]) if d["mean_head"] else None,
            Activation.parse(d["logvar_head"]) if d["logvar_head"] else None,
            Objective.from_dict(d["objective"]),
        )
    raise ValueError(f"unknown model family {d['family']!r}")


def save_checkpoint(m, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(m), indent=1) + "\n")


def load_checkpoint(path):
    return model_from_dict(json.loads(Path(path).read_text()))
