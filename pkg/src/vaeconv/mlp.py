"""Fully connected networks: forward pass, reverse-mode gradients, norm-ball projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import Activation, act, act_d1, constants
from .numerics import RngKey, spectral_norm


@dataclass(frozen=True)
class MlpParams:
    """Layers (W_i, b_i) with one activation per layer and an optional norm bound ``a``.

    ``bound=None`` means the parameters are unconstrained.
    """

    weights: tuple
    biases: tuple
    activations: tuple
    bound: float | None = None

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases)
        acts = tuple(self.activations)
        if not (len(ws) == len(bs) == len(acts)) or not ws:
            raise ValueError("need one bias and one activation per weight matrix")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[0] != b.size:
                raise ValueError(f"layer {i + 1}: weight {w.shape} does not match bias {b.shape}")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i + 1}: input width {w.shape[1]} != previous output {ws[i - 1].shape[0]}"
                )
        if self.bound is not None and not self.bound > 0:
            raise ValueError("norm bound must be positive")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {vec.shape}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(tuple(ws), tuple(bs), self.activations, self.bound)

    def norm_inf(self) -> float:
        """max over layers of spectral norm of W_i and Euclidean norm of b_i."""
        vals = [spectral_norm(w) for w in self.weights]
        vals += [float(np.linalg.norm(b)) for b in self.biases]
        return max(vals)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    batched: bool = True

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def forward(p: MlpParams, z) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate the network on one input vector or on a batch of rows."""
    z = np.asarray(z, dtype=np.float64)
    batched = z.ndim == 2
    h = z if batched else z[None, :]
    if h.shape[1] != p.d_in:
        raise ValueError(f"layer 1: expected input width {p.d_in}, got {h.shape[1]}")
    trace = ForwardTrace(inputs=h, batched=batched)
    for w, b, f in zip(p.weights, p.biases, p.activations):
        u = h @ w.T + b
        h = act(f, u)
        trace.pre.append(u)
        trace.post.append(h)
    out = h if batched else h[0]
    return out, trace


def _deltas(p: MlpParams, trace: ForwardTrace, upstream) -> list:
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 1:
        up = up[None, :]
    if len(trace.pre) != p.n_layers or trace.pre[-1].shape[1] != p.d_out:
        raise ValueError("trace does not belong to these parameters")
    if up.shape != trace.pre[-1].shape:
        raise ValueError(f"upstream shape {up.shape} does not match output {trace.pre[-1].shape}")
    deltas = [None] * p.n_layers
    d = up * act_d1(p.activations[-1], trace.pre[-1])
    deltas[-1] = d
    for i in range(p.n_layers - 1, 0, -1):
        d = (d @ p.weights[i]) * act_d1(p.activations[i - 1], trace.pre[i - 1])
        deltas[i - 1] = d
    return deltas


def _layer_inputs(trace: ForwardTrace) -> list:
    return [trace.inputs] + trace.post[:-1]


def backprop_params(p: MlpParams, trace: ForwardTrace, upstream) -> list:
    """Gradient of sum_rows upstream . G(z) w.r.t. each (W_i, b_i), as a list of pairs."""
    deltas = _deltas(p, trace, upstream)
    return [(d.T @ h, d.sum(axis=0)) for d, h in zip(deltas, _layer_inputs(trace))]


def backprop_params_per_sample(p: MlpParams, trace: ForwardTrace, upstream) -> np.ndarray:
    """Per-row flat parameter gradients, shape (rows, p.size), in ``MlpParams.flat`` order."""
    deltas = _deltas(p, trace, upstream)
    n = deltas[0].shape[0]
    parts = []
    for d, h in zip(deltas, _layer_inputs(trace)):
        parts.append(np.einsum("ni,nj->nij", d, h).reshape(n, -1))
        parts.append(d)
    return np.concatenate(parts, axis=1)


def backprop_input(p: MlpParams, trace: ForwardTrace, upstream) -> np.ndarray:
    """Gradient of upstream . G(z) w.r.t. the input z (row-wise for batches)."""
    deltas = _deltas(p, trace, upstream)
    g = deltas[0] @ p.weights[0]
    return g if trace.batched else g[0]


def flatten_grads(grads: list) -> np.ndarray:
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def project_norm(p: MlpParams) -> MlpParams:
    """Rescale each W_i and b_i into the ball of radius ``p.bound``."""
    a = p.bound
    if a is None or not np.isfinite(a):
        raise ValueError("projection needs a finite norm bound")
    ws = []
    for w in p.weights:
        sn = spectral_norm(w)
        ws.append(w * (a / sn) if sn > a else w)
    bs = []
    for b in p.biases:
        nb = float(np.linalg.norm(b))
        bs.append(b * (a / nb) if nb > a else b)
    return MlpParams(tuple(ws), tuple(bs), p.activations, a)


def _check_theory(p: MlpParams):
    if p.bound is None or not np.isfinite(p.bound):
        raise ValueError("bounds need a finite norm bound a")
    for f in p.activations:
        if constants(f)[1] is None:
            raise ValueError(f"no smoothness constant available for {f.kind}")


def lipschitz_coefficient(a: float, m_consts) -> float:
    m_consts = list(m_consts)
    return float(a ** (len(m_consts) - 1) * np.prod(m_consts))


def smoothness_coefficient(a: float, m_consts, l_consts) -> float:
    m = list(m_consts)
    n = len(m)
    total = 0.0
    for k in range(1, n + 1):
        total += (
            l_consts[k - 1]
            * a ** (n - 2 + k)
            * np.prod([mi * mi for mi in m[: k - 1]])
            * np.prod(m[k:])
        )
    return float(total)


def lipschitz_bound(p: MlpParams) -> float:
    """a^{N-1} prod M_f: the factor multiplying (|z| + 1) in the parameter-gradient bound."""
    _check_theory(p)
    return lipschitz_coefficient(p.bound, [constants(f)[0] for f in p.activations])


def smoothness_bound(p: MlpParams) -> float:
    """sum_k L_k a^{N-2+k} prod_{i<k} M_i^2 prod_{i>k} M_i: the factor multiplying N(|z|^2 + 1)."""
    _check_theory(p)
    cs = [constants(f) for f in p.activations]
    return smoothness_coefficient(p.bound, [c[0] for c in cs], [c[1] for c in cs])


def certified_bounds(p: MlpParams, z_norm: float) -> tuple[float, float]:
    """Valid bounds on |grad_theta u.G(z)| and on its Lipschitz constant in theta, for |u| = 1.

    Layer recursion over the a-ball that keeps the bias terms and f(0) offsets
    dropped by the product-formula coefficients, so it holds for every depth.
    Norms on theta are Euclidean.
    """
    _check_theory(p)
    a = p.bound
    h, jac, hess = float(z_norm), 0.0, 0.0
    for w, f in zip(p.weights, p.activations):
        m_f, l_f = constants(f)
        du = np.sqrt(h * h + 1.0 + (a * jac) ** 2)
        hess = l_f * du * du + m_f * (2.0 * jac + a * hess)
        jac = m_f * du
        f0 = float(abs(act(f, 0.0)))
        h = f0 * np.sqrt(w.shape[0]) + m_f * a * (h + 1.0)
    return float(jac), float(hess)


def init(dims, activations, key: RngKey, bound: float | None = None) -> MlpParams:
    """Gaussian weights with standard deviation 1/sqrt(fan_in), zero biases, then projection."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least input and output widths")
    if isinstance(activations, Activation):
        activations = [activations] * (len(dims) - 1)
    activations = list(activations)
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = key.generator()
    ws = tuple(rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i]) for i in range(len(dims) - 1))
    bs = tuple(np.zeros(d) for d in dims[1:])
    p = MlpParams(ws, bs, tuple(activations), bound)
    return project_norm(p) if bound is not None else p
