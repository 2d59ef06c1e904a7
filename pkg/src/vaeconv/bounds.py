"""Computable smoothness constants for the deep Gaussian VAE and empirical audits.

Every integrand is written as a polynomial in r = |x| and e = |eps| with
nonnegative coefficients, after bounding |z| <= C_mu + sqrt(C_Sigma) e (the
clamp extremes dominate every admissible encoder). Expectations then split
into data moments of r and chi moments of e. Odd data moments are bounded by
Cauchy-Schwarz from E r^2 and E r^4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .activations import constants
from .mlp import lipschitz_coefficient, smoothness_coefficient
from .models import Clamps, DeepGaussianVae, LinearVae
from .numerics import RngKey, spectral_norm


class Poly:
    """Polynomial in (r, e) stored as {(i, j): coefficient}."""

    def __init__(self, terms=None):
        self.terms = {}
        for k, v in (terms or {}).items():
            if v:
                self.terms[k] = self.terms.get(k, 0.0) + float(v)

    @classmethod
    def const(cls, c: float) -> "Poly":
        return cls({(0, 0): c})

    @classmethod
    def r(cls, c: float = 1.0) -> "Poly":
        return cls({(1, 0): c})

    @classmethod
    def e(cls, c: float = 1.0) -> "Poly":
        return cls({(0, 1): c})

    def __add__(self, other):
        other = other if isinstance(other, Poly) else Poly.const(other)
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return Poly(out)

    __radd__ = __add__

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return Poly({k: v * other for k, v in self.terms.items()})
        out = {}
        for (i, j), a in self.terms.items():
            for (k, l), b in other.terms.items():
                key = (i + k, j + l)
                out[key] = out.get(key, 0.0) + a * b
        return Poly(out)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        out = Poly.const(1.0)
        for _ in range(n):
            out = out * self
        return out

    def __call__(self, r, e):
        return sum(c * np.power(r, i) * np.power(e, j) for (i, j), c in self.terms.items())

    def expect(self, r_moment, e_moment) -> float:
        return float(sum(c * r_moment(i) * e_moment(j) for (i, j), c in self.terms.items()))

    def nonnegative(self) -> bool:
        return all(v >= 0 for v in self.terms.values())


def chi_moment(d: int, j: int) -> float:
    """E |eps|^j for eps ~ N(0, I_d)."""
    return float(np.exp(0.5 * j * np.log(2.0) + gammaln(0.5 * (d + j)) - gammaln(0.5 * d)))


def data_moment_fn(second: float, fourth: float):
    """E r^i for i <= 4 from (E r^2, E r^4); odd orders via Cauchy-Schwarz."""
    if not (np.isfinite(second) and np.isfinite(fourth)) or second < 0 or fourth < 0:
        raise ValueError("data moments must be finite and nonnegative")

    def moment(i: int) -> float:
        if i == 0:
            return 1.0
        if i == 1:
            return math.sqrt(second)
        if i == 2:
            return second
        if i == 3:
            return math.sqrt(second * fourth)
        if i == 4:
            return fourth
        raise ValueError(f"data moment of order {i} needs more than a fourth moment")

    return moment


@dataclass
class SmoothnessReport:
    L_S: float | str
    L_PW: float | str
    L_K: float | str
    L_BBVI: float | str
    C_S_leading: float
    C_PW_leading: float
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "L_S": self.L_S,
            "L_PW": self.L_PW,
            "L_K": self.L_K,
            "L_BBVI": self.L_BBVI,
            "C_S_leading": self.C_S_leading,
            "C_PW_leading": self.C_PW_leading,
            "inputs": self.inputs,
        }


def leading_constants(d_z: int, n_ed: int, n_dd: int, a: float) -> tuple[float, float]:
    n_max = max(n_ed, n_dd)
    n_tot = n_ed + n_dd
    return d_z**2 * n_max * a ** (2 * (n_max - 1)), d_z * n_tot * a ** (2 * (n_tot - 1))


def _unavailable(reason: str) -> str:
    return f"unavailable({reason})"


def _layer_constants(m: DeepGaussianVae):
    dec = [constants(f) for f in m.decoder.activations]
    enc = [constants(f) for f in m.encoder.activations[:-1]]
    # the encoder's last layer is followed by the bounded heads
    heads = [constants(h) for h in (m.mean_head, m.logvar_head)]
    last_m = max(constants(m.encoder.activations[-1])[0] * max(h[0] for h in heads), 0.0)
    last_l = max(h[1] for h in heads)
    enc.append((last_m, last_l))
    return dec, enc


class _Pieces:
    """Bound building blocks as polynomials in (r, e)."""

    def __init__(self, m: DeepGaussianVae, a: float):
        c: Clamps = m.clamps
        dec, enc = _layer_constants(m)
        self.n_dd, self.n_ed = len(dec), len(enc)
        md = [v[0] for v in dec]
        ld = [v[1] for v in dec]
        me = [v[0] for v in enc]
        le = [v[1] for v in enc]
        self.dec_consts, self.enc_consts = dec, enc
        nd, ne = self.n_dd, self.n_ed
        pd, pe = float(np.prod(md)), float(np.prod(me))
        self.dec_lip = lipschitz_coefficient(a, md)
        self.dec_smooth = smoothness_coefficient(a, md, ld)
        self.enc_lip = lipschitz_coefficient(a, me)
        self.enc_smooth = smoothness_coefficient(a, me, le)
        # input-smoothness sums for the decoder
        dec_z_smooth = sum(
            ld[k - 1] * a ** (nd + k) * np.prod([v * v for v in md[: k - 1]]) * np.prod(md[k:]) for k in range(1, nd + 1)
        )
        dec_mixed = sum(
            ld[k - 1] * a ** (nd - 1 + k) * np.prod([v * v for v in md[: nd - 1]]) * np.prod(md[k:])
            for k in range(1, nd + 1)
        )
        one = Poly.const(1.0)
        r, e = Poly.r(), Poly.e()
        zeta = Poly.const(c.C_mu) + e * math.sqrt(c.C_Sigma)
        self.zeta = zeta
        c_rec = r + c.C_G
        self.c_rec = c_rec
        c2 = m.c2
        cs = c.c_Sigma
        rp1 = r + 1.0

        # alpha(x, z) <= q-part + p-part
        dz, dx = m.d_z, m.d_x
        q_log = 0.5 * dz * max(abs(math.log(2 * math.pi * c.C_Sigma)), abs(math.log(2 * math.pi * cs)))
        p_log = 0.5 * dx * abs(math.log(2 * math.pi * c2)) + 0.5 * dz * math.log(2 * math.pi)
        self.alpha = (zeta**2 + c.C_mu**2) * (1.0 / cs) + q_log + (r**2 + c.C_G**2) * (1.0 / c2) + p_log + zeta**2 * 0.5

        # score-function pieces
        m_grad_g = (zeta + 1.0) * self.dec_lip
        l_grad_g = (zeta**2 + 1.0) * (nd * self.dec_smooth)
        self.score_dec = (m_grad_g**2 * 2.0 + c_rec * l_grad_g) * (1.0 / c2)
        self.m_enc = rp1 * self.enc_lip
        lip_sq = a ** (2 * (ne - 1)) * pe * pe
        self.l2 = (
            (zeta**2 * 2.0 + 2.0 * c.C_mu**2 + zeta + c.C_mu + cs) * rp1**2 * (ne / cs * self.enc_smooth)
            + (zeta**2 * 2.0 + 2.0 * c.C_mu**2 + zeta * 3.0 + 3.0 * c.C_mu + 1.0) * rp1**2 * (ne / cs * lip_sq)
        )

        # pathwise pieces
        self.L_p = (
            c_rec * dec_z_smooth
            + a ** (2 * nd) * pd * pd
            + (Poly.const(c.C_mu**2) + e**2 * c.C_Sigma) * (a ** (2 * nd - 1) * pd * pd)
            + c_rec * (a ** (nd - 1) * pd)
            + c_rec * zeta * dec_mixed
        )
        self.M = zeta * (one + c_rec * (a**nd * pd)) + e * cs**-0.5
        self.L_q = Poly.const(1.0 / cs) + e * rp1 * (0.5 * cs**-1.5 * self.enc_lip)
        self.M_g = (one + e * (0.5 * cs**-0.5)) * rp1 * self.enc_lip
        self.L_g = (one + e * (0.5 * cs**-0.5)) * (r**2 + 1.0) * (ne * self.enc_smooth) + e * rp1**2 * (
            0.25 * cs**-1.5 * lip_sq
        )
        self.lip_sq = lip_sq


def _check_inputs(m: DeepGaussianVae, data_moments):
    vals = [m.c2, *vars(m.clamps).values(), *data_moments]
    if m.decoder.bound is not None:
        vals.append(m.decoder.bound)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError("non-finite input to compute_bounds")


def _iwae_ratio_term(P: _Pieces, data_radius: float | None, noise_radius: float | None) -> float | str:
    """Bound on E[M rho + 2 M rho^3] with rho = exp(2 alpha).

    For Gaussian noise the expectation is infinite (alpha grows like |eps|^2 / 2,
    so rho^3 outgrows the Gaussian tail). It is finite only when both |x| and
    |eps| are bounded, in which case the integrand is bounded by its value at
    the two radii.
    """
    if data_radius is None or noise_radius is None:
        return _unavailable("importance-ratio moment diverges unless |x| and |eps| are bounded")
    al = float(P.alpha(data_radius, noise_radius))
    mm = float(P.M(data_radius, noise_radius))
    log_val = math.log(mm) + 2 * al + math.log1p(2 * math.exp(min(4 * al, 700.0)))
    if log_val > 700 or 4 * al > 700:
        return _unavailable("importance-ratio moment overflows float64")
    return math.exp(log_val)


def compute_bounds(
    m: DeepGaussianVae,
    data_moments,
    K: int = 1,
    data_radius: float | None = None,
    noise_radius: float | None = None,
    target_smoothness: float | None = None,
) -> SmoothnessReport:
    """Plug architecture constants, clamps and data moments into the smoothness-constant formulas.

    ``data_moments`` is (E|x|^2, E|x|^4). ``data_radius`` and ``noise_radius`` bound
    |x| and |eps|; they are only used for the importance-ratio part of L_K. ``target_smoothness`` is the Lipschitz constant
    of grad_z log p(x, z) for BBVI (taken from the objective's target if omitted).
    """
    _check_inputs(m, data_moments)
    a = m.decoder.bound
    if m.encoder.bound != a:
        a = None if a is None or m.encoder.bound is None else max(a, m.encoder.bound)
    n_dd, n_ed = m.decoder.n_layers, m.encoder.n_layers
    inputs = {
        "a": a,
        "N_ed": n_ed,
        "N_dd": n_dd,
        "d_z": m.d_z,
        "d_x": m.d_x,
        "c2": m.c2,
        "clamps": vars(m.clamps).copy(),
        "data_moments": [float(v) for v in data_moments],
        "K": int(K),
    }
    if a is None or not np.isfinite(a):
        reason = _unavailable("unbounded parameters (no finite a)")
        return SmoothnessReport(reason, reason, reason, reason, math.nan, math.nan, inputs)
    cs, cpw = leading_constants(m.d_z, n_ed, n_dd, a)
    acts = list(m.decoder.activations) + list(m.encoder.activations)
    if any(constants(f)[1] is None for f in acts):
        reason = _unavailable("ReLU has no smoothness constant")
        return SmoothnessReport(reason, reason, reason, reason, cs, cpw, inputs)
    if not m.clamped:
        reason = _unavailable("bounds need the clamped decoder and encoder heads")
        return SmoothnessReport(reason, reason, reason, reason, cs, cpw, inputs)

    P = _Pieces(m, a)
    inputs["activation_constants"] = {"decoder": P.dec_consts, "encoder": P.enc_consts}
    rm = data_moment_fn(*data_moments)

    def em(j):
        return chi_moment(m.d_z, j)

    def E(p: Poly) -> float:
        return p.expect(rm, em)

    l_dd = E(P.score_dec)
    l_ed = E(P.alpha * P.l2 * 2.0 + P.m_enc**2 * 3.0 + P.alpha * P.m_enc**2 * 4.0)
    L_S = l_dd + l_ed
    L_PW = E(P.L_p + P.M_g**2 * (P.L_p + P.L_q * 2.0) + P.L_g * P.M * 3.0 + P.M_g * P.L_q * 2.0) + E(P.L_p * P.M_g)

    if int(K) > 1:
        extra = _iwae_ratio_term(P, data_radius, noise_radius)
        L_K = extra if isinstance(extra, str) else L_PW + extra / int(K)
    else:
        L_K = L_PW

    if target_smoothness is None and m.objective.target is not None:
        target_smoothness = m.objective.target.smoothness()
    if target_smoothness is None:
        L_BBVI = _unavailable("target log-density has no global smoothness constant")
    else:
        m_b = Poly.e(m.clamps.c_Sigma**-0.5)
        L_BBVI = E(P.M_g**2 * (P.L_q * 2.0 + float(target_smoothness)) + P.L_g * m_b * 3.0 + P.M_g * P.L_q * 2.0)

    vals = [v for v in (L_S, L_PW, L_K, L_BBVI) if not isinstance(v, str)]
    if any(not (np.isfinite(v) and v > 0) for v in vals):
        raise FloatingPointError("bound evaluation produced a non-finite or nonpositive constant")
    return SmoothnessReport(L_S, L_PW, L_K, L_BBVI, cs, cpw, inputs)


# ---------------------------------------------------------------------------
# Linear VAE per-block constants


LINEAR_BLOCKS = ("W1", "b1", "W2", "b2", "D")


def linear_block_slices(m: LinearVae) -> dict:
    dx, dz = m.d_x, m.d_z
    sizes = [dx * dz, dx, dz * dx, dz, dz]
    out, pos = {}, 0
    for name, n in zip(LINEAR_BLOCKS, sizes):
        out[name] = slice(pos, pos + n)
        pos += n
    return out


def linear_block_constants(m: LinearVae, mean_x, second_x, d_min: float | None = None) -> dict:
    """Lipschitz constants of each gradient block in its own block, others held fixed.

    ``d_min`` is the smallest D entry allowed along the perturbation (defaults to c_D).
    """
    mu = np.asarray(mean_x, dtype=np.float64)
    S = np.asarray(second_x, dtype=np.float64)
    c2 = m.c2
    e_mm = m.W2 @ S @ m.W2.T + np.outer(m.W2 @ mu, m.b2) + np.outer(m.b2, m.W2 @ mu) + np.outer(m.b2, m.b2)
    gram = m.W1.T @ m.W1 + c2 * np.eye(m.d_z)
    d_min = m.c_D if d_min is None else d_min
    return {
        "W1": (float(np.max(m.D)) + spectral_norm(e_mm)) / c2,
        "b1": 1.0 / c2,
        "W2": spectral_norm(gram) * spectral_norm(S) / c2,
        "b2": spectral_norm(gram) / c2,
        "D": 0.5 / d_min**2,
    }


# ---------------------------------------------------------------------------
# audits


@dataclass
class AuditResult:
    max_ratio: float
    bound: float
    passed: bool
    trials: int
    violations: int = 0

    def to_dict(self) -> dict:
        return vars(self).copy()


def lipschitz_ratio(grad_fn, p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    dist = float(np.linalg.norm(p - q))
    if dist == 0.0:
        return 0.0
    return float(np.linalg.norm(grad_fn(p) - grad_fn(q))) / dist


def audit_smoothness(
    base_params,
    grad_fn,
    trials: int,
    radius: float,
    bound: float,
    key: RngKey,
    project=None,
    slack: float = 0.0,
    spread: float = 0.0,
) -> AuditResult:
    """Max of |grad(p) - grad(q)| / |p - q| over random pairs near ``base_params``.

    Each pair is a point within ``spread`` of the base and a second point within
    ``radius`` of the first, both passed through ``project`` (e.g. onto the a-ball).
    ``grad_fn`` must be deterministic (fixed noise shared by both points). A pair
    counts as a violation when its ratio exceeds bound * (1 + slack).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    base = np.asarray(base_params, dtype=np.float64)
    rng = key.child("audit").generator()
    proj = project or (lambda v: v)
    worst, bad = 0.0, 0
    for _ in range(trials):
        u = rng.standard_normal(base.size)
        p = proj(base + spread * rng.uniform() * u / np.linalg.norm(u))
        v = rng.standard_normal(base.size)
        q = proj(p + radius * rng.uniform() * v / np.linalg.norm(v))
        ratio = lipschitz_ratio(grad_fn, p, q)
        worst = max(worst, ratio)
        if ratio > bound * (1.0 + slack):
            bad += 1
    return AuditResult(worst, float(bound), bad == 0, trials, bad)
