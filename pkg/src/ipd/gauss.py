"""Diagonal Gaussian algebra used for ensemble disagreement.

All functions broadcast over leading axes; the last axis is the event
dimension.  KL-type quantities are summed over that axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape:
            raise ValueError(f"mean {mean.shape} and var {var.shape} differ")
        if np.any(~(var > 0)):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1] if self.mean.ndim else 1


def _check(p: DiagGaussian, q: DiagGaussian) -> None:
    if p.mean.shape[-1:] != q.mean.shape[-1:]:
        raise ValueError(f"dimension mismatch: {p.mean.shape} vs {q.mean.shape}")


def kl(p: DiagGaussian, q: DiagGaussian) -> np.ndarray:
    """KL(p || q) in nats."""
    _check(p, q)
    vp = np.maximum(p.var, VAR_FLOOR)
    vq = np.maximum(q.var, VAR_FLOOR)
    d = q.mean - p.mean
    terms = np.log(vq / vp) + (vp + d * d) / vq - 1.0
    return np.maximum(0.5 * terms.sum(axis=-1), 0.0)


def geometric_mean(p: DiagGaussian, q: DiagGaussian) -> DiagGaussian:
    """Precision-averaged Gaussian: var = (½/var_p + ½/var_q)⁻¹."""
    _check(p, q)
    vp = np.maximum(p.var, VAR_FLOOR)
    vq = np.maximum(q.var, VAR_FLOOR)
    # written symmetrically in (p, q) and exact when p == q
    var = np.where(vp == vq, vp, 2.0 * vp * vq / (vp + vq))
    mean = (vq * p.mean + vp * q.mean) / (vp + vq)
    mean = np.where((p.mean == q.mean) & (vp == vq), p.mean, mean)
    return DiagGaussian(mean, var)


def gjs(p: DiagGaussian, q: DiagGaussian) -> np.ndarray:
    m = geometric_mean(p, q)
    return 0.5 * (kl(p, m) + kl(q, m))


PAIR_NORMS = ("as_written", "mean_over_pairs")


def ensemble_uncertainty(members: Sequence[DiagGaussian], pair_norm: str = "as_written") -> np.ndarray:
    """Pairwise GJS disagreement over unordered member pairs.

    ``as_written`` divides the pair sum by E(E-1); ``mean_over_pairs``
    divides by the number of pairs, E(E-1)/2.
    """
    E = len(members)
    if E < 2:
        raise ValueError("ensemble needs at least two members")
    if pair_norm not in PAIR_NORMS:
        raise ValueError(f"pair_norm must be one of {PAIR_NORMS}")
    total = sum(gjs(members[i], members[j]) for i, j in combinations(range(E), 2))
    norm = E * (E - 1) if pair_norm == "as_written" else E * (E - 1) / 2
    return total / norm


def stacked_uncertainty(means: np.ndarray, variances: np.ndarray, pair_norm: str = "as_written") -> np.ndarray:
    """Vectorised ``ensemble_uncertainty`` for arrays shaped (E, ..., d)."""
    members = [DiagGaussian(m, v) for m, v in zip(means, np.maximum(variances, VAR_FLOOR))]
    return ensemble_uncertainty(members, pair_norm)


def sample(g: DiagGaussian, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1:] != g.mean.shape[-1:]:
        raise ValueError("noise dimension does not match the Gaussian")
    return g.mean + np.sqrt(np.maximum(g.var, VAR_FLOOR)) * noise
