"""Sequential VAE on a Gaussian state-space model with a backward variational family.

Generative model::

    z_0 ~ N(0, tau_m2 I),  z_{t+1} | z_t ~ N(mu_m(z_t), tau_m2 I),  x_t | z_t ~ N(mu_g(z_t), tau_g2 I)

Variational smoothing family::

    q(z_{0:T}) = q_T(z_T | x_T) prod_{t<T} q_t(z_t | z_{t+1}, x_t)

Each factor is a diagonal Gaussian whose (mean, log-variance) come from a network.
Sampling runs backward from z_T, so gradients are accumulated forward in t.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .activations import Activation, Identity, SoftClip, act, act_d1
from .gradient import GradEstimate
from .mlp import MlpParams, backprop_input, backprop_params_per_sample, forward, init as init_mlp
from .models import Clamps, default_heads
from .numerics import RngKey, gauss_sample

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Ssm:
    transition: MlpParams
    emission: MlpParams
    tau_m2: float = 1.0
    tau_g2: float = 1.0

    def __post_init__(self):
        if not (self.tau_m2 > 0 and self.tau_g2 > 0):
            raise ValueError("state and observation variances must be positive")
        if self.transition.d_in != self.transition.d_out or self.emission.d_in != self.transition.d_out:
            raise ValueError("transition must map d_z -> d_z and emission d_z -> d_x")

    @property
    def d_z(self) -> int:
        return self.transition.d_in

    @property
    def d_x(self) -> int:
        return self.emission.d_out

    @property
    def size(self) -> int:
        return self.transition.size + self.emission.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.transition.flat(), self.emission.flat()])

    def with_flat(self, vec) -> "Ssm":
        nt = self.transition.size
        return replace(self, transition=self.transition.with_flat(vec[:nt]), emission=self.emission.with_flat(vec[nt:]))


def linear_ssm(A, C, tau_m2: float = 1.0, tau_g2: float = 1.0) -> Ssm:
    """z_{t+1} = A z_t + noise, x_t = C z_t + noise (unclamped, for exact checks)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    tr = MlpParams((A,), (np.zeros(A.shape[0]),), (Identity(),))
    em = MlpParams((C,), (np.zeros(C.shape[0]),), (Identity(),))
    return Ssm(tr, em, tau_m2, tau_g2)


def make_ssm(
    d_x: int,
    d_z: int,
    key: RngKey,
    hidden=(),
    activation: Activation | str = "tanh",
    tau_m2: float = 1.0,
    tau_g2: float = 1.0,
    state_clamp: float | None = 5.0,
    s: float = 5.0,
    bound: float | None = None,
) -> Ssm:
    """Random SSM; the transition output passes through SoftClip(-C, C, s) so |mu_m|_inf <= C."""
    if isinstance(activation, str):
        activation = Activation.parse(activation)
    last = SoftClip(-state_clamp, state_clamp, s) if state_clamp is not None else Identity()
    tr = init_mlp([d_z, *hidden, d_z], [activation] * len(hidden) + [last], key.child("transition"), bound)
    em = init_mlp([d_z, *hidden, d_x], [activation] * len(hidden) + [Identity()], key.child("emission"), bound)
    return Ssm(tr, em, tau_m2, tau_g2)


@dataclass(frozen=True)
class BackwardVariational:
    """Terminal net x_T -> (mu, logvar) and step nets (z_{t+1}, x_t) -> (mu, logvar).

    ``steps`` holds one shared net, or one net per t < T (unshared mode).
    """

    terminal: MlpParams
    steps: tuple
    mean_head: Activation | None = None
    logvar_head: Activation | None = None

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise ValueError("need at least one step net")
        dz2 = self.terminal.d_out
        if dz2 % 2:
            raise ValueError("nets must emit 2 * d_z values")
        for net in steps:
            if net.d_out != dz2 or net.d_in != dz2 // 2 + self.terminal.d_in:
                raise ValueError("step nets must map (z_{t+1}, x_t) -> 2 * d_z")
        object.__setattr__(self, "steps", steps)

    @property
    def shared(self) -> bool:
        return len(self.steps) == 1

    @property
    def d_z(self) -> int:
        return self.terminal.d_out // 2

    def step_net(self, t: int) -> tuple[int, MlpParams]:
        if self.shared:
            return 0, self.steps[0]
        if t >= len(self.steps):
            raise ValueError(f"no step net for t={t}; have {len(self.steps)}")
        return t, self.steps[t]

    @property
    def size(self) -> int:
        return self.terminal.size + sum(s.size for s in self.steps)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.terminal.flat()] + [s.flat() for s in self.steps])

    def with_flat(self, vec) -> "BackwardVariational":
        vec = np.asarray(vec, dtype=np.float64)
        pos = self.terminal.size
        term = self.terminal.with_flat(vec[:pos])
        steps = []
        for s in self.steps:
            steps.append(s.with_flat(vec[pos:pos + s.size]))
            pos += s.size
        return replace(self, terminal=term, steps=tuple(steps))

    def offsets(self) -> list[int]:
        out, pos = [], self.terminal.size
        for s in self.steps:
            out.append(pos)
            pos += s.size
        return out


def make_backward(
    d_x: int,
    d_z: int,
    key: RngKey,
    T: int = 1,
    hidden=(),
    activation: Activation | str = "tanh",
    shared: bool = True,
    clamps: Clamps | None = None,
    bound: float | None = None,
) -> BackwardVariational:
    if isinstance(activation, str):
        activation = Activation.parse(activation)
    acts = [activation] * len(hidden) + [Identity()]
    term = init_mlp([d_x, *hidden, 2 * d_z], acts, key.child("terminal"), bound)
    n_steps = 1 if shared else max(T, 1)
    steps = tuple(
        init_mlp([d_z + d_x, *hidden, 2 * d_z], acts, key.child("step", t), bound) for t in range(n_steps)
    )
    mh, lh = default_heads(d_z, clamps) if clamps is not None else (None, None)
    return BackwardVariational(term, steps, mh, lh)


def simulate(s: Ssm, T: int, key: RngKey) -> tuple[np.ndarray, np.ndarray]:
    """Forward-sample (z_{0:T}, x_{0:T})."""
    if T < 0:
        raise ValueError("T must be >= 0")
    noise_z = gauss_sample(key.child("state"), (T + 1, s.d_z))
    noise_x = gauss_sample(key.child("obs"), (T + 1, s.d_x))
    tm, tg = np.sqrt(s.tau_m2), np.sqrt(s.tau_g2)
    z = np.empty((T + 1, s.d_z))
    z[0] = tm * noise_z[0]
    for t in range(T):
        z[t + 1] = forward(s.transition, z[t])[0] + tm * noise_z[t + 1]
    x = forward(s.emission, z)[0] + tg * noise_x
    return z, x


def _head(h, v):
    if h is None:
        return v, np.ones_like(v)
    return act(h, v), act_d1(h, v)


class _Chain:
    """Backward reparameterised sampling of z_{0:T} for K draws, with traces kept."""

    def __init__(self, q: BackwardVariational, x: np.ndarray, eps: np.ndarray):
        K, T1, dz = eps.shape
        self.T = T1 - 1
        self.K = K
        self.z = np.empty((K, T1, dz))
        self.logvar = np.empty((K, T1, dz))
        self.sigma = np.empty((K, T1, dz))
        self.dmu = np.empty((K, T1, dz))
        self.dlv = np.empty((K, T1, dz))
        self.traces = [None] * T1
        for t in range(self.T, -1, -1):
            if t == self.T:
                inp = np.repeat(x[t][None, :], K, axis=0)
                net = q.terminal
            else:
                inp = np.concatenate([self.z[:, t + 1], np.repeat(x[t][None, :], K, axis=0)], axis=1)
                net = q.step_net(t)[1]
            out, trace = forward(net, inp)
            mu, dmu = _head(q.mean_head, out[:, :dz])
            lv, dlv = _head(q.logvar_head, out[:, dz:])
            sig = np.exp(0.5 * lv)
            self.z[:, t] = mu + sig * eps[:, t]
            self.logvar[:, t], self.sigma[:, t] = lv, sig
            self.dmu[:, t], self.dlv[:, t] = dmu, dlv
            self.traces[t] = trace
        self.log_q = -0.5 * np.sum(eps**2 + self.logvar + LOG_2PI, axis=(1, 2))


def _check(s: Ssm, q: BackwardVariational, x, eps) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    if x.shape[1] != s.d_x or q.d_z != s.d_z or eps.shape[1:] != (x.shape[0], s.d_z):
        raise ValueError(f"shapes do not match: x {x.shape}, eps {eps.shape}, d_z {s.d_z}")
    return x, eps


def _model_terms(s: Ssm, x: np.ndarray, z: np.ndarray):
    """log nu(z_0) + sum log m + sum log g per draw, plus what the gradients need."""
    K, T1, dz = z.shape
    T = T1 - 1
    flat_z = z.reshape(K * T1, dz)
    G, gtrace = forward(s.emission, flat_z)
    rg = (np.tile(x, (K, 1)) - G) / s.tau_g2
    ll_g = -0.5 * s.tau_g2 * np.sum(rg * rg, axis=1).reshape(K, T1).sum(axis=1) - 0.5 * T1 * s.d_x * np.log(
        2 * np.pi * s.tau_g2
    )
    lp = -0.5 * np.sum(z[:, 0] ** 2, axis=1) / s.tau_m2 - 0.5 * dz * np.log(2 * np.pi * s.tau_m2)
    ll_m = np.zeros(K)
    mtrace = rm = None
    if T > 0:
        prev = z[:, :-1].reshape(K * T, dz)
        Mz, mtrace = forward(s.transition, prev)
        rm = (z[:, 1:].reshape(K * T, dz) - Mz) / s.tau_m2
        ll_m = -0.5 * s.tau_m2 * np.sum(rm * rm, axis=1).reshape(K, T).sum(axis=1) - 0.5 * T * dz * np.log(
            2 * np.pi * s.tau_m2
        )
    return lp + ll_m + ll_g, (gtrace, rg, mtrace, rm)


def seq_log_weights(s: Ssm, q: BackwardVariational, x, eps) -> np.ndarray:
    """log p(x_{0:T}, z_{0:T}) - log q(z_{0:T}) for each of the K noise draws."""
    x, eps = _check(s, q, x, eps)
    chain = _Chain(q, x, eps)
    lj, _ = _model_terms(s, x, chain.z)
    return lj - chain.log_q


def seq_elbo(s: Ssm, q: BackwardVariational, x, eps=None, key: RngKey | None = None, K: int = 1) -> float:
    """Monte Carlo sequential ELBO; ``eps`` has shape (K, T+1, d_z) or is drawn from ``key``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if eps is None:
        if key is None:
            raise ValueError("need noise or a key")
        eps = gauss_sample(key.child("eps"), (K, x.shape[0], s.d_z))
    return float(np.mean(seq_log_weights(s, q, x, eps)))


def seq_pathwise_grad(
    s: Ssm, q: BackwardVariational, x, K: int = 1, key: RngKey | None = None, eps=None, learn_theta: bool = True
) -> GradEstimate:
    """Reparameterised gradient of the sequential ELBO w.r.t. (theta, phi).

    theta is (transition, emission) in flat order; phi is (terminal, steps...).
    ``learn_theta=False`` zeroes the theta block (model held fixed).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if eps is None:
        if key is None:
            raise ValueError("need noise or a key")
        eps = gauss_sample(key.child("eps"), (int(K), x.shape[0], s.d_z))
    x, eps = _check(s, q, x, eps)
    K, T1, dz = eps.shape
    T = T1 - 1
    chain = _Chain(q, x, eps)
    z = chain.z
    _, (gtrace, rg, mtrace, rm) = _model_terms(s, x, z)

    # explicit partial derivatives of the model terms w.r.t. each z_t
    gz = backprop_input(s.emission, gtrace, rg).reshape(K, T1, dz)
    gz[:, 0] -= z[:, 0] / s.tau_m2
    if T > 0:
        gz[:, :-1] += backprop_input(s.transition, mtrace, rm).reshape(K, T, dz)
        gz[:, 1:] -= rm.reshape(K, T, dz)

    if learn_theta:
        em = backprop_params_per_sample(s.emission, gtrace, rg).reshape(K, T1, -1).sum(axis=1)
        if T > 0:
            tr = backprop_params_per_sample(s.transition, mtrace, rm).reshape(K, T, -1).sum(axis=1)
        else:
            tr = np.zeros((K, s.transition.size))
        theta = np.concatenate([tr, em], axis=1)
    else:
        theta = np.zeros((K, s.size))

    phi = np.zeros((K, q.size))
    offs = q.offsets()
    carry = np.zeros((K, dz))
    for t in range(T1):
        g = gz[:, t] + carry
        up_mu = g * chain.dmu[:, t]
        # the -log q term contributes +1/2 per log-variance coordinate
        up_lv = (0.5 * g * chain.sigma[:, t] * eps[:, t] + 0.5) * chain.dlv[:, t]
        up = np.concatenate([up_mu, up_lv], axis=1)
        if t == T:
            net, start = q.terminal, 0
        else:
            idx, net = q.step_net(t)
            start = offs[idx]
        phi[:, start:start + net.size] += backprop_params_per_sample(net, chain.traces[t], up)
        if t < T:
            carry = backprop_input(net, chain.traces[t], up)[:, :dz]
    terms = np.concatenate([theta, phi], axis=1)
    if not np.all(np.isfinite(terms)):
        raise FloatingPointError("non-finite sequential gradient terms")
    return GradEstimate.from_terms(terms, s.size, B=1, K=K, estimator="seq-pathwise", T=T)
