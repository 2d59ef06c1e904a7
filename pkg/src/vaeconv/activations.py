"""Activation functions with analytic derivatives and global derivative bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

KINDS = ("sigmoid", "tanh", "softplus", "celu", "softclip", "identity", "relu")


@dataclass(frozen=True)
class Activation:
    kind: str
    alpha: float = 1.0
    s1: float = -1.0
    s2: float = 1.0
    s: float = 5.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "celu" and not self.alpha > 0:
            raise ValueError("CELU requires alpha > 0")
        if self.kind == "softclip":
            if not self.s1 <= self.s2:
                raise ValueError("SoftClip requires s1 <= s2")
            if not self.s > 0:
                raise ValueError("SoftClip requires s > 0")

    @property
    def outside_theory(self) -> bool:
        return self.kind == "relu"

    def spec(self) -> str:
        if self.kind == "celu":
            return f"celu:{float(self.alpha)!r}"
        if self.kind == "softclip":
            return f"softclip:{float(self.s1)!r},{float(self.s2)!r},{float(self.s)!r}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """Parse ``name`` or ``name:args``, e.g. ``celu:2`` or ``softclip:-1,1,5``."""
        name, _, args = text.strip().lower().partition(":")
        vals = [float(v) for v in args.split(",")] if args else []
        if name == "celu":
            return cls("celu", alpha=vals[0] if vals else 1.0)
        if name == "softclip":
            if vals and len(vals) != 3:
                raise ValueError("softclip takes three arguments s1,s2,s")
            return cls("softclip", *([1.0] + vals)) if vals else cls("softclip")
        if vals:
            raise ValueError(f"{name} takes no arguments")
        return cls(name)


def Sigmoid() -> Activation:
    return Activation("sigmoid")


def Tanh() -> Activation:
    return Activation("tanh")


def Softplus() -> Activation:
    return Activation("softplus")


def Celu(alpha: float = 1.0) -> Activation:
    return Activation("celu", alpha=alpha)


def SoftClip(s1: float, s2: float, s: float = 5.0) -> Activation:
    return Activation("softclip", s1=s1, s2=s2, s=s)


def Identity() -> Activation:
    return Activation("identity")


def Relu() -> Activation:
    return Activation("relu")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _dsigmoid(x):
    p = expit(x)
    return p * (1.0 - p)


def _softclip(a: Activation, x):
    mid = 0.5 * (a.s1 + a.s2)
    half = 0.5 * (a.s2 - a.s1)
    y = x - mid
    ay = np.abs(y)
    s = a.s
    # odd around the midpoint; the far branch avoids cancelling two large softplus values
    near = (_softplus(s * (ay + half)) - _softplus(s * (ay - half))) / s - half
    far = (_softplus(-s * (ay + half)) - _softplus(-s * (ay - half))) / s + half
    g = np.where(ay < half, near, far)
    # the clip only removes rounding past the ends
    return np.clip(mid + np.sign(y) * g, a.s1, a.s2)


def act(a: Activation, x):
    x = np.asarray(x, dtype=np.float64)
    k = a.kind
    if k == "sigmoid":
        return expit(x)
    if k == "tanh":
        return np.tanh(x)
    if k == "softplus":
        return _softplus(x)
    if k == "celu":
        return np.where(x >= 0, x, a.alpha * np.expm1(np.minimum(x, 0.0) / a.alpha))
    if k == "softclip":
        return _softclip(a, x)
    if k == "identity":
        return x.copy()
    return np.maximum(x, 0.0)


def act_d1(a: Activation, x):
    x = np.asarray(x, dtype=np.float64)
    k = a.kind
    if k == "sigmoid":
        return _dsigmoid(x)
    if k == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if k == "softplus":
        return expit(x)
    if k == "celu":
        return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0) / a.alpha))
    if k == "softclip":
        u1 = a.s * (x - a.s1)
        u2 = a.s * (x - a.s2)
        return expit(u1) - expit(u2)
    if k == "identity":
        return np.ones_like(x)
    return (x > 0).astype(np.float64)


def act_d2(a: Activation, x):
    x = np.asarray(x, dtype=np.float64)
    k = a.kind
    if k == "sigmoid":
        p = expit(x)
        return p * (1.0 - p) * (1.0 - 2.0 * p)
    if k == "tanh":
        t = np.tanh(x)
        return -2.0 * t * (1.0 - t * t)
    if k == "softplus":
        return _dsigmoid(x)
    if k == "celu":
        return np.where(x >= 0, 0.0, np.exp(np.minimum(x, 0.0) / a.alpha) / a.alpha)
    if k == "softclip":
        return a.s * (_dsigmoid(a.s * (x - a.s1)) - _dsigmoid(a.s * (x - a.s2)))
    return np.zeros_like(x)


def constants(a: Activation) -> tuple[float, float | None]:
    """(M_f, L_f): bounds on sup|f'| and sup|f''|. ReLU has no L_f and returns None."""
    k = a.kind
    if k == "sigmoid":
        return 0.25, 0.25
    if k == "tanh":
        return 1.0, 1.0
    if k == "softplus":
        return 1.0, 0.25
    if k == "celu":
        return 1.0, 1.0 / a.alpha
    if k == "softclip":
        return 1.0, a.s / 4.0
    if k == "identity":
        return 1.0, 0.0
    return 1.0, None
