from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradEstimate:
    """Stacked (theta, phi) gradient with the per-sample terms it averages.

    ``per_sample_terms`` has one row per (i, l) pair in row-major (batch, sample)
    order; ``flat_theta`` and ``flat_phi`` are the column means of its two blocks.
    """

    flat_theta: np.ndarray
    flat_phi: np.ndarray
    per_sample_terms: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.flat_theta, self.flat_phi])

    @property
    def d_theta(self) -> int:
        return self.flat_theta.size

    @property
    def d_phi(self) -> int:
        return self.flat_phi.size

    @classmethod
    def from_terms(cls, terms: np.ndarray, d_theta: int, **meta) -> "GradEstimate":
        terms = np.asarray(terms, dtype=np.float64)
        mean = terms.mean(axis=0)
        return cls(mean[:d_theta].copy(), mean[d_theta:].copy(), terms, dict(meta))
