"""Dependence coefficients of an explicit finite joint law of (X, Y)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import PROB_TOL

# sign-pattern enumeration runs over the smaller margin; 2^20 patterns is the cap
MAX_PATTERN_BITS = 20


@dataclass(frozen=True)
class MixingCoefficients:
    """``phi``: largest gap ``|p(y|x) - p(y)|``; ``alpha``: largest event
    covariance ``|P(A,B) - P(A)P(B)|``; ``alpha_cov``: the same supremum over
    functions bounded by 1 (four times ``alpha``); ``rho``: maximal correlation.
    """

    phi: float
    alpha: float
    alpha_cov: float
    rho: float


def _check_joint(joint: ArrayLike) -> NDArray[np.float64]:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("joint must be a 2-d table p[x, y]")
    if p.min() < 0 or abs(p.sum() - 1.0) > 1e3 * PROB_TOL:
        raise ValueError(f"joint is not a probability table (sum {p.sum():.15g})")
    return p


def phi_coefficient(joint: ArrayLike) -> float:
    """``max over x with p(x) > 0 and y of |p(y | x) - p(y)|``."""
    p = _check_joint(joint)
    px, py = p.sum(axis=1), p.sum(axis=0)
    keep = px > 0
    cond = p[keep] / px[keep, None]
    return float(np.abs(cond - py[None, :]).max())


def covariance_alpha(joint: ArrayLike) -> float:
    """``sup Cov(f(X), g(Y))`` over ``|f|, |g| <= 1``.

    The covariance is bilinear in (f, g), so the supremum sits at sign
    vectors; for a fixed f the best g is the sign of ``f^T (p - px py^T)``.
    """
    p = _check_joint(joint)
    gap = p - np.outer(p.sum(axis=1), p.sum(axis=0))
    if gap.shape[0] > gap.shape[1]:
        gap = gap.T
    n = gap.shape[0]
    if n > MAX_PATTERN_BITS:
        raise ValueError(f"sign-pattern search over {n} cells exceeds 2^{MAX_PATTERN_BITS} patterns")
    # f and -f give the same value, so the first sign is fixed
    best = 0.0
    for tail in itertools.product((1.0, -1.0), repeat=n - 1):
        f = np.array((1.0, *tail))
        best = max(best, float(np.abs(f @ gap).sum()))
    return best


def rho_coefficient(joint: ArrayLike) -> float:
    """Maximal correlation: second singular value of ``p / sqrt(px py)``."""
    p = _check_joint(joint)
    px, py = p.sum(axis=1), p.sum(axis=0)
    p = p[px > 0][:, py > 0]
    px, py = px[px > 0], py[py > 0]
    if min(p.shape) < 2:
        return 0.0
    sv = np.linalg.svd(p / np.sqrt(np.outer(px, py)), compute_uv=False)
    return float(min(1.0, sv[1]))


def mixing_coefficients(joint: ArrayLike) -> MixingCoefficients:
    a = covariance_alpha(joint)
    return MixingCoefficients(phi_coefficient(joint), a / 4.0, a, rho_coefficient(joint))
