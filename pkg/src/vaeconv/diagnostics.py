"""Gradient-norm tracking, convergence-rate fits and estimator variance."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

RECORD_COLUMNS = ("iter", "elbo_train", "elbo_test", "grad_norm_sq", "est_var", "snr_theta", "snr_phi", "lr", "wall_ms")


@dataclass(frozen=True)
class DiagnosticsRecord:
    iter: int
    grad_norm_sq: float
    elbo_train: float = float("nan")
    elbo_test: float = float("nan")
    est_var: float = float("nan")
    snr_theta: float = float("nan")
    snr_phi: float = float("nan")
    lr: float = float("nan")
    wall_ms: float = 0.0

    def __post_init__(self):
        if self.iter < 0:
            raise ValueError("iteration must be nonnegative")
        if not self.grad_norm_sq >= 0:
            raise ValueError("grad_norm_sq must be nonnegative")

    def row(self) -> dict:
        return {c: getattr(self, c) for c in RECORD_COLUMNS}


@dataclass(frozen=True)
class RateFit:
    """Fit of y against n: ``power`` is y = c n^{-p}; ``log_sqrt`` is y = c log(n) / sqrt(n)."""

    model: str
    c: float
    p: float | None
    r2: float
    window: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def _values(records, name="grad_norm_sq"):
    if isinstance(records, dict):
        return np.asarray(records["iter"], dtype=np.float64), np.asarray(records[name], dtype=np.float64)
    recs = list(records)
    if recs and isinstance(recs[0], DiagnosticsRecord):
        return (
            np.array([r.iter for r in recs], dtype=np.float64),
            np.array([getattr(r, name) for r in recs], dtype=np.float64),
        )
    arr = np.asarray(recs, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 2:
        return arr[:, 0], arr[:, 1]
    return np.arange(1, arr.size + 1, dtype=np.float64), arr


def random_iterate_metric(records) -> float:
    """Mean of grad_norm_sq over the recorded iterates (uniform random iterate)."""
    _, y = _values(records)
    if y.size == 0:
        raise ValueError("no records")
    return float(np.mean(y))


def _r2(resid: np.ndarray, y: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))


def fit_rate(records, window=None) -> dict:
    """Least-squares fits in log space of both rate models over ``window`` = (n0, n1).

    Accepts DiagnosticsRecords, a column dict, or (n, y) pairs. Returns
    ``{"power": RateFit, "log_sqrt": RateFit, "best": name}``.
    """
    n, y = _values(records)
    if window is None:
        window = (max(2.0, float(n.min())), float(n.max()))
    n0, n1 = window
    sel = (n >= n0) & (n <= n1) & (n >= 2)
    n, y = n[sel], y[sel]
    if n.size < 20:
        raise ValueError(f"need at least 20 records in window, got {n.size}")
    if np.any(~(y > 0)):
        raise ValueError("rate fits need positive values")
    ly = np.log(y)
    ln = np.log(n)
    A = np.column_stack([np.ones_like(ln), ln])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    power = RateFit("power", float(np.exp(coef[0])), float(-coef[1]), _r2(ly - A @ coef, ly), (n0, n1))
    shape = np.log(ln) - 0.5 * ln
    logc = float(np.mean(ly - shape))
    logsq = RateFit("log_sqrt", float(np.exp(logc)), None, _r2(ly - logc - shape, ly), (n0, n1))
    best = "power" if power.r2 >= logsq.r2 else "log_sqrt"
    return {"power": power, "log_sqrt": logsq, "best": best}


def estimator_variance(per_sample_terms) -> float:
    """Mean squared distance of the per-sample flat gradients from their mean (divide by n)."""
    t = np.asarray(per_sample_terms, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape[0] < 2:
        raise ValueError("need at least two terms")
    d = t - t.mean(axis=0)
    return float(np.mean(np.sum(d * d, axis=1)))
