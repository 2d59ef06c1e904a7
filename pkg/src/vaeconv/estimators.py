"""Score-function, pathwise and importance-weighted gradient estimators.

All estimators work on a batch of B rows with K latent draws per row and
return a :class:`GradEstimate` whose per-sample terms are ordered (i, l)
row-major. Noise comes from an :class:`RngKey` (one (B, K, d_z) block per
call) or can be passed explicitly, which is how frozen-noise checks work.
"""

from __future__ import annotations

import numpy as np

from .gradient import GradEstimate
from .mlp import backprop_input, backprop_params_per_sample, forward
from .models import (
    DegenerateWeightsError,
    DeepGaussianVae,
    _rows,
    encode,
    log_mean_exp,
)
from .numerics import RngKey, gauss_sample

__all__ = [
    "GradEstimate",
    "draw_noise",
    "score_grad",
    "pathwise_grad",
    "iwae_grad",
    "snr_measure",
    "ESTIMATORS",
]


def draw_noise(key: RngKey, B: int, K: int, d_z: int) -> np.ndarray:
    return gauss_sample(key.child("eps"), (B, K, d_z))


def _noise(m: DeepGaussianVae, X: np.ndarray, K: int, key, eps) -> np.ndarray:
    if int(K) < 1:
        raise ValueError("K must be >= 1")
    if eps is None:
        if key is None:
            raise ValueError("need a key or explicit noise")
        return draw_noise(key, X.shape[0], int(K), m.d_z)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (X.shape[0], K, m.d_z):
        raise ValueError(f"noise shape {eps.shape} != {(X.shape[0], K, m.d_z)}")
    return eps


class _Pass:
    """Shared forward computations for one estimator call on B*K rows."""

    def __init__(self, m: DeepGaussianVae, X: np.ndarray, eps: np.ndarray):
        self.m = m
        B, K, dz = eps.shape
        self.B, self.K = B, K
        self.enc = encode(m, X)
        self.eps = eps.reshape(B * K, dz)
        self.mu = np.repeat(self.enc.mu, K, axis=0)
        self.logvar = np.repeat(self.enc.logvar, K, axis=0)
        self.sigma = np.exp(0.5 * self.logvar)
        self.z = self.mu + self.sigma * self.eps
        self.X = np.repeat(X, K, axis=0)
        self.bbvi = m.objective.kind == "bbvi"
        if self.bbvi:
            tgt = m.objective.target
            self.log_lik = tgt.log_density(self.X, self.z)
            self.grad_z_lik = tgt.grad_z(self.X, self.z)
            self.theta_terms = np.zeros((B * K, m.d_theta))
        else:
            G, dtrace = forward(m.decoder, self.z)
            up = (self.X - G) / m.c2
            self.log_lik = -0.5 * m.c2 * np.sum(up * up, axis=1) - 0.5 * m.d_x * np.log(2 * np.pi * m.c2)
            self.grad_z_lik = backprop_input(m.decoder, dtrace, up)
            dec = backprop_params_per_sample(m.decoder, dtrace, up)
            # the fixed-c2 slot always carries a zero gradient
            self.theta_terms = np.concatenate([dec, np.zeros((B * K, 1))], axis=1)

    def log_q(self) -> np.ndarray:
        return -0.5 * np.sum(self.eps**2 + self.logvar + np.log(2 * np.pi), axis=1)

    def log_prior(self) -> np.ndarray:
        return -0.5 * np.sum(self.z**2, axis=1) - 0.5 * self.z.shape[1] * np.log(2 * np.pi)

    def phi_terms(self, up_mu: np.ndarray, up_logvar: np.ndarray) -> np.ndarray:
        """Per-row encoder gradients given upstream gradients on the two heads."""
        enc = self.enc
        up_raw = np.concatenate(
            [up_mu * np.repeat(enc.dmu_raw, self.K, axis=0), up_logvar * np.repeat(enc.dlogvar_raw, self.K, axis=0)],
            axis=1,
        )
        trace = enc.trace
        if self.K > 1:
            trace = _repeat_trace(trace, self.K)
        return backprop_params_per_sample(self.m.encoder, trace, up_raw)

    def sampled_log_weight_grads(self, beta: float):
        """Per-row gradients of the fully sampled log-weight (beta-scaled prior and entropy)."""
        if self.bbvi:
            gz = self.grad_z_lik
            up_mu = gz
            up_lv = 0.5 * gz * self.sigma * self.eps + 0.5
        else:
            gz = self.grad_z_lik - beta * self.z
            up_mu = gz
            up_lv = 0.5 * gz * self.sigma * self.eps + 0.5 * beta
        return self.theta_terms, self.phi_terms(up_mu, up_lv)

    def log_weight(self, beta: float) -> np.ndarray:
        if self.bbvi:
            return self.log_lik - self.log_q()
        return self.log_lik + beta * (self.log_prior() - self.log_q())


def _repeat_trace(trace, K: int):
    from .mlp import ForwardTrace

    return ForwardTrace(
        inputs=np.repeat(trace.inputs, K, axis=0),
        pre=[np.repeat(u, K, axis=0) for u in trace.pre],
        post=[np.repeat(h, K, axis=0) for h in trace.post],
        batched=True,
    )


def _prepare(m: DeepGaussianVae, batch, K: int, key, eps):
    X, _ = _rows(batch, m.d_x) if m.objective.kind != "bbvi" else (np.atleast_2d(np.asarray(batch, dtype=np.float64)), False)
    eps = _noise(m, X, K, key, eps)
    return _Pass(m, X, eps)


def _finish(p: _Pass, theta: np.ndarray, phi: np.ndarray, kind: str) -> GradEstimate:
    terms = np.concatenate([theta, phi], axis=1)
    if not np.all(np.isfinite(terms)):
        raise FloatingPointError(f"non-finite gradient terms in {kind} estimator")
    return GradEstimate.from_terms(terms, theta.shape[1], B=p.B, K=p.K, estimator=kind)


def score_grad(m: DeepGaussianVae, batch, K: int = 1, key: RngKey | None = None, eps=None) -> GradEstimate:
    """Score-function estimator: theta part grad log p(x, z); phi part log w * grad log q(z | x)."""
    beta = m.objective.effective_beta
    p = _prepare(m, batch, K, key, eps)
    f = p.log_weight(beta)[:, None]
    up_mu = f * p.eps / p.sigma
    up_lv = f * 0.5 * (p.eps**2 - 1.0)
    return _finish(p, p.theta_terms, p.phi_terms(up_mu, up_lv), "score")


def pathwise_grad(
    m: DeepGaussianVae, batch, K: int = 1, key: RngKey | None = None, eps=None, sampled: bool = False
) -> GradEstimate:
    """Reparameterised estimator.

    Default: gradient of the closed-form KL plus the reparameterised reconstruction
    gradient. ``sampled=True`` differentiates the fully sampled log-weight instead.
    BBVI has no closed-form KL and always uses the sampled form.
    """
    beta = m.objective.effective_beta
    p = _prepare(m, batch, K, key, eps)
    if sampled or p.bbvi:
        theta, phi = p.sampled_log_weight_grads(beta)
        return _finish(p, theta, phi, "pathwise-sampled")
    gz = p.grad_z_lik
    up_mu = gz - beta * p.mu
    up_lv = 0.5 * gz * p.sigma * p.eps - 0.5 * beta * (np.exp(p.logvar) - 1.0)
    return _finish(p, p.theta_terms, p.phi_terms(up_mu, up_lv), "pathwise")


def iwae_grad(m: DeepGaussianVae, batch, K: int = 1, key: RngKey | None = None, eps=None) -> GradEstimate:
    """Self-normalised sum_l w~_l grad log w_l per row.

    Per-sample terms are scaled by K so that their mean is the estimate.
    """
    p = _prepare(m, batch, K, key, eps)
    lw = p.log_weight(1.0).reshape(p.B, p.K)
    if np.any(np.isnan(lw)):
        raise DegenerateWeightsError("NaN log-weights")
    lse = log_mean_exp(lw, axis=1) + np.log(p.K)
    wt = np.exp(lw - lse[:, None]).reshape(-1, 1) * p.K
    theta, phi = p.sampled_log_weight_grads(1.0)
    return _finish(p, theta * wt, phi * wt, "iwae")


ESTIMATORS = {
    "score": score_grad,
    "pathwise": pathwise_grad,
    "pathwise-sampled": lambda m, b, K=1, key=None, eps=None: pathwise_grad(m, b, K, key, eps, sampled=True),
    "iwae": iwae_grad,
}


def _block_snr(samples: np.ndarray) -> float:
    if samples.shape[1] == 0:
        return float("nan")
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1)
    # coordinates whose spread is at roundoff level are deterministic: they carry
    # no estimator noise and are left out; if every coordinate is deterministic the
    # block SNR is inf (nonzero signal) or 0 (identically zero)
    noisy = std > 1e-9 * np.maximum(np.abs(mean), 1e-300)
    if not np.any(noisy):
        return float("inf") if np.any(mean != 0) else 0.0
    return float(np.linalg.norm(np.abs(mean[noisy]) / std[noisy]))


def snr_measure(estimates) -> tuple[float, float]:
    """l2 norm of coordinatewise |mean| / std over theta- and phi-coordinates.

    Coordinates with no sampling spread are skipped; a block with no spread at
    all gives ``inf`` (nonzero mean) or 0.
    """
    estimates = list(estimates)
    if len(estimates) < 30:
        raise ValueError(f"need at least 30 estimates, got {len(estimates)}")
    theta = np.stack([e.flat_theta for e in estimates])
    phi = np.stack([e.flat_phi for e in estimates])
    return _block_snr(theta), _block_snr(phi)
