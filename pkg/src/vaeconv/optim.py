"""SGD and Adam for gradient ascent with the C / sqrt(n) step schedule.

Adam follows the un-bias-corrected form with delta inside the square root:

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    params <- params + lr_{k+1} * m / sqrt(v + delta)
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np


def make_schedule(c_gamma: float) -> Callable[[int], float]:
    """n -> c_gamma / sqrt(n) for n >= 1."""
    if not c_gamma > 0:
        raise ValueError("C_gamma must be positive")

    def schedule(n: int) -> float:
        if n < 1:
            raise ValueError("step index starts at 1")
        return c_gamma / np.sqrt(n)

    return schedule


@dataclass(frozen=True)
class OptimState:
    kind: str
    c_gamma: float
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    k: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.c_gamma > 0:
            raise ValueError("C_gamma must be positive")
        if self.k < 0:
            raise ValueError("iteration counter must be nonnegative")
        if self.kind == "adam":
            if not (0 <= self.beta1 < np.sqrt(self.beta2) < 1):
                raise ValueError("Adam needs 0 <= beta1 < sqrt(beta2) < 1")
            if self.delta < 0:
                raise ValueError("delta must be nonnegative")
            if self.v is not None and np.any(self.v < 0):
                raise ValueError("second-moment state must be nonnegative")

    @property
    def lr(self) -> float:
        """Step size the next update will use."""
        return self.c_gamma / np.sqrt(self.k + 1)


def sgd(c_gamma: float) -> OptimState:
    return OptimState("sgd", c_gamma)


def adam(c_gamma: float, beta1: float = 0.9, beta2: float = 0.999, delta: float = 1e-8) -> OptimState:
    return OptimState("adam", c_gamma, beta1=beta1, beta2=beta2, delta=delta)


def step(state: OptimState, params, grad) -> tuple[OptimState, np.ndarray]:
    """One ascent step. Pure: the inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"params {params.shape} and grad {grad.shape} differ in shape")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at coordinate {int(bad[0])}")
    lr = state.lr
    if state.kind == "sgd":
        return replace(state, k=state.k + 1), params + lr * grad
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    denom = np.sqrt(v + state.delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        upd = np.where(denom > 0, m / denom, 0.0)
    return replace(state, m=m, v=v, k=state.k + 1), params + lr * upd
