"""Dense array helpers, keyed Gaussian sampling and a finite-difference oracle."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Hashable

import numpy as np

Vec64 = np.ndarray
Mat64 = np.ndarray


def as_vec(x, name: str = "vector") -> Vec64:
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def as_mat(x, name: str = "matrix") -> Mat64:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-d array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def _label_word(label: Hashable) -> int:
    if isinstance(label, (bool, np.bool_)):
        return int(label)
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be nonnegative")
        return int(label)
    if isinstance(label, str):
        # offset keeps string tags from colliding with small integer labels
        return zlib.crc32(label.encode("utf-8")) + (1 << 40)
    raise TypeError(f"unsupported stream label {label!r}")


@dataclass(frozen=True)
class RngKey:
    """A seed plus a path of stream labels.

    Every draw is a pure function of the key, so results never depend on
    evaluation order or on how work is split across workers.
    """

    seed: int
    labels: tuple = ()

    def __post_init__(self):
        if int(self.seed) < 0:
            raise ValueError("seed must be nonnegative")
        object.__setattr__(self, "labels", tuple(self.labels))

    def child(self, *labels: Hashable) -> "RngKey":
        return RngKey(self.seed, self.labels + tuple(labels))

    def generator(self) -> np.random.Generator:
        words = [int(self.seed)] + [_label_word(lab) for lab in self.labels]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def gauss_sample(key: RngKey, dim) -> np.ndarray:
    """Standard normal draws of length ``dim`` (or of shape ``dim`` if a tuple)."""
    shape = (dim,) if np.isscalar(dim) else tuple(dim)
    if any(int(s) < 1 for s in shape):
        raise ValueError(f"sample dimensions must be >= 1, got {shape}")
    return key.generator().standard_normal(shape)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float | None = None) -> Vec64:
    """Central differences; default step is 1e-5 * max(1, |x_i|) per coordinate."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    if h is not None and not h > 0:
        raise ValueError("h must be positive")
    grad = np.empty_like(x)
    for i in range(x.size):
        hi = h if h is not None else 1e-5 * max(1.0, abs(x[i]))
        probe = x.copy()
        probe[i] = x[i] + hi
        fp = float(f(probe))
        if not np.isfinite(fp):
            raise FloatingPointError(f"non-finite value at probe point x[{i}] + {hi:g}")
        probe[i] = x[i] - hi
        fm = float(f(probe))
        if not np.isfinite(fm):
            raise FloatingPointError(f"non-finite value at probe point x[{i}] - {hi:g}")
        grad[i] = (fp - fm) / (2.0 * hi)
    return grad


def spectral_norm(m, max_iter: int = 100, rtol: float = 1e-12) -> float:
    """Largest singular value by power iteration on the Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        return float(np.linalg.norm(m))
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    if not np.any(gram):
        return 0.0
    # start from the heaviest column: never orthogonal to the top eigenvector
    # unless that column is itself degenerate
    v = gram[:, np.argmax(np.einsum("ij,ij->j", gram, gram))].copy()
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        if lam > 0 and abs(new - lam) <= rtol * lam:
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))
