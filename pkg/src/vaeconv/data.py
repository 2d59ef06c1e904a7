"""Synthetic data sources with known moments, CSV datasets and keyed minibatching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import RngKey


def _gauss_moments(mean: np.ndarray, cov: np.ndarray) -> tuple[float, float]:
    """(E|x|^2, E|x|^4) for x ~ N(mean, cov)."""
    tr = float(np.trace(cov))
    mm = float(mean @ mean)
    second = tr + mm
    fourth = second**2 + 2.0 * float(np.sum(cov * cov)) + 4.0 * float(mean @ cov @ mean)
    return second, fourth


@dataclass(frozen=True)
class LinearGaussianFactor:
    """x = W z + mean + sqrt(noise) e with z ~ N(0, I_{d_z}), e ~ N(0, I_{d_x})."""

    W: np.ndarray
    noise: float = 1.0
    mean: np.ndarray | None = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        mean = np.zeros(W.shape[0]) if self.mean is None else np.asarray(self.mean, dtype=np.float64).reshape(-1)
        if mean.size != W.shape[0] or not self.noise > 0:
            raise ValueError("bad factor model: mean width or noise")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "mean", mean)

    @property
    def d_x(self) -> int:
        return self.W.shape[0]

    @property
    def d_z(self) -> int:
        return self.W.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        return self.W @ self.W.T + self.noise * np.eye(self.d_x)

    @property
    def second_moment(self) -> np.ndarray:
        return self.covariance + np.outer(self.mean, self.mean)

    def moments(self) -> tuple[float, float]:
        return _gauss_moments(self.mean, self.covariance)

    def first_two(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact (E[x], E[x x^T])."""
        return self.mean.copy(), self.second_moment

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.d_z))
        e = rng.standard_normal((n, self.d_x))
        return z @ self.W.T + self.mean + np.sqrt(self.noise) * e

    def to_dict(self) -> dict:
        return {"kind": "linear_factor", "W": self.W.tolist(), "noise": self.noise, "mean": self.mean.tolist()}


def linear_factor(d_x: int, d_z: int, key: RngKey, scale: float = 1.0, noise: float = 1.0) -> LinearGaussianFactor:
    """Random loading matrix with i.i.d. N(0, scale^2 / d_z) entries, zero mean."""
    W = key.child("loadings").generator().standard_normal((d_x, d_z)) * scale / np.sqrt(d_z)
    return LinearGaussianFactor(W, noise)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        k, d = mu.shape
        if covs.ndim == 1:
            covs = covs[:, None, None] * np.eye(d)
        if w.size != k or covs.shape != (k, d, d) or np.any(w <= 0):
            raise ValueError("mixture needs positive weights and one (mean, cov) per component")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", covs)

    @property
    def d_x(self) -> int:
        return self.means.shape[1]

    def moments(self) -> tuple[float, float]:
        s2 = s4 = 0.0
        for w, mu, cov in zip(self.weights, self.means, self.covs):
            a, b = _gauss_moments(mu, cov)
            s2 += w * a
            s4 += w * b
        return s2, s4

    def first_two(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact (E[x], E[x x^T])."""
        mean = self.weights @ self.means
        second = np.einsum("k,kij->ij", self.weights, self.covs + np.einsum("ki,kj->kij", self.means, self.means))
        return mean, second

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        e = rng.standard_normal((n, self.d_x))
        chol = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], e)

    def to_dict(self) -> dict:
        return {
            "kind": "mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }


@dataclass(frozen=True)
class CsvFile:
    path: str

    def load(self) -> np.ndarray:
        return read_csv(self.path)

    def moments(self) -> tuple[float, float]:
        return estimate_moments(self.load())

    @property
    def d_x(self) -> int:
        return self.load().shape[1]

    def to_dict(self) -> dict:
        return {"kind": "csv", "path": str(self.path)}


DataSource = LinearGaussianFactor | GaussianMixture | CsvFile


def source_from_dict(d: dict, key: RngKey | None = None):
    kind = d.get("kind", "linear_factor")
    if kind == "linear_factor":
        if "W" in d:
            return LinearGaussianFactor(np.array(d["W"]), float(d.get("noise", 1.0)), d.get("mean"))
        if key is None:
            raise ValueError("random loadings need a key")
        return linear_factor(int(d["d_x"]), int(d["d_z"]), key, float(d.get("scale", 1.0)), float(d.get("noise", 1.0)))
    if kind == "mixture":
        return GaussianMixture(d["weights"], d["means"], d["covs"])
    if kind == "csv":
        return CsvFile(d["path"])
    raise ValueError(f"unknown data source {kind!r}")


def estimate_moments(data: np.ndarray) -> tuple[float, float]:
    """Plug-in sample means of |x|^2 and |x|^4."""
    sq = np.sum(np.asarray(data, dtype=np.float64) ** 2, axis=1)
    return float(sq.mean()), float((sq * sq).mean())


def generate(src, n: int | None, key: RngKey) -> np.ndarray:
    """Draw ``n`` rows from a synthetic source; a CSV source returns its first ``n`` rows."""
    if isinstance(src, CsvFile):
        rows = src.load()
        if n is None:
            return rows
        if n > rows.shape[0]:
            raise ValueError(f"requested {n} rows, file has {rows.shape[0]}")
        return rows[:n]
    if n is None or n < 1:
        raise ValueError("n must be >= 1 for synthetic sources")
    return src.sample(int(n), key.child("data").generator())


def minibatch(data: np.ndarray, B: int, iteration: int, key: RngKey) -> np.ndarray:
    """B rows drawn without replacement, returned in index order; pure in (iteration, key)."""
    n = data.shape[0]
    if B > n:
        raise ValueError(f"batch size {B} exceeds dataset size {n}")
    if B == n:
        return data
    idx = key.child("batch", int(iteration)).generator().choice(n, size=B, replace=False)
    return data[np.sort(idx)]


def train_test_split(data: np.ndarray, test_frac: float, key: RngKey) -> tuple[np.ndarray, np.ndarray]:
    n = data.shape[0]
    n_test = int(round(test_frac * n))
    if not 0 <= n_test < n:
        raise ValueError("test fraction leaves no training rows")
    perm = key.child("split").generator().permutation(n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return data[train], data[test]


def write_csv(path, data) -> None:
    """Header ``x0,...,x{d-1}``, shortest round-trip decimals, LF line endings."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(f"x{j}" for j in range(data.shape[1])) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValueError(f"{path}: empty file")
        expected = [f"x{j}" for j in range(len(header))]
        if header != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            rows.append([float(v) for v in rec])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    out = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{path}: non-finite values")
    return out
