"""Estimators of the common state kernel q0 and the ERM rate fixed point.

Two estimators follow the scikit-learn API. :class:`TabularMLE` is the
saturated maximum-likelihood fit with additive shrinkage. :class:`HALDensity`
is a multinomial logistic fit on zero-order indicator features
``1(x >= knot)`` (knots at the observed points, all coordinate subsets) with an
L1 penalty chosen by blocked cross-validation.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import bisect
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from .core import TransitionTable, TrialData, UnsupportedError, observed_contexts

DEFAULT_SHRINKAGE = 0.5
DEFAULT_LAMBDAS = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4)


@dataclass(frozen=True)
class FittedDensity:
    """An estimated kernel with its estimator tag and fit metadata."""

    estimator: str
    table: TransitionTable
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def probs(self) -> NDArray[np.float64]:
        return self.table.probs

    def to_dict(self) -> dict[str, Any]:
        return {**self.table.to_dict(), "estimator": self.estimator, "meta": self.meta}


def _as_codes(X: ArrayLike) -> NDArray[np.int64]:
    X = np.asarray(X)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError("context codes must be a single column")
        X = X[:, 0]
    return X.astype(np.int64)


def empirical_risk(probs: NDArray, codes: ArrayLike, states: ArrayLike) -> float:
    """Average negative log-likelihood ``-mean log q(l | c)`` (``inf`` on a zero)."""
    p = np.asarray(probs)[_as_codes(codes), np.asarray(states, dtype=np.int64)]
    with np.errstate(divide="ignore"):
        return float(-np.log(p).mean())


class TabularMLE(BaseEstimator):
    """Per-context frequencies with ``shrinkage`` pseudo-counts per state.

    ``q(l | c) = (n(c, l) + e) / (n(c) + e * S)``; a context with no
    observations and ``e = 0`` gets the uniform row.
    """

    def __init__(self, n_contexts: int, n_states: int, shrinkage: float = DEFAULT_SHRINKAGE):
        self.n_contexts = n_contexts
        self.n_states = n_states
        self.shrinkage = shrinkage

    def fit(self, X: ArrayLike, y: ArrayLike, sample_weight: ArrayLike | None = None) -> "TabularMLE":
        if self.shrinkage < 0:
            raise ValueError("shrinkage must be nonnegative")
        codes = _as_codes(X)
        y = np.asarray(y, dtype=np.int64)
        w = np.ones(len(codes)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        counts = np.zeros((self.n_contexts, self.n_states))
        np.add.at(counts, (codes, y), w)
        num = counts + self.shrinkage
        den = num.sum(axis=1, keepdims=True)
        empty = den[:, 0] <= 0
        num[empty] = 1.0
        den[empty] = self.n_states
        probs = num / den
        self.counts_ = counts
        self.table_ = TransitionTable(probs / probs.sum(axis=1, keepdims=True))
        return self

    def predict_proba(self, X: ArrayLike) -> NDArray[np.float64]:
        return self.table_.rows(_as_codes(X))

    def score(self, X: ArrayLike, y: ArrayLike) -> float:
        """Mean log-likelihood (higher is better)."""
        return -empirical_risk(self.table_.probs, X, y)


def indicator_basis(points: NDArray, knots: NDArray) -> NDArray[np.float64]:
    """Columns ``prod_{d in S} 1(x_d >= knot_d)`` over knots and nonempty subsets S."""
    points = np.atleast_2d(points)
    d = points.shape[1]
    ge = points[:, None, :] >= knots[None, :, :]  # (n, n_knots, d)
    cols = []
    for r in range(1, d + 1):
        for subset in itertools.combinations(range(d), r):
            cols.append(ge[:, :, subset].all(axis=2))
    return np.concatenate(cols, axis=1).astype(np.float64)


class HALDensity(BaseEstimator):
    """L1-penalized multinomial logistic density over indicator features.

    Args:
        n_states: number of outcome categories.
        lambdas: penalty grid (penalty per unit of average log-loss).
        n_folds: contiguous cross-validation blocks.
        kappa: uniform mass mixed in when a category is absent from the fit.
        tol, max_iter: solver controls.
    """

    def __init__(
        self,
        n_states: int,
        lambdas: Sequence[float] = DEFAULT_LAMBDAS,
        n_folds: int = 5,
        kappa: float = 1e-6,
        tol: float = 1e-6,
        max_iter: int = 5000,
        random_state: int = 0,
    ):
        self.n_states = n_states
        self.lambdas = lambdas
        self.n_folds = n_folds
        self.kappa = kappa
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    # rows are aggregated: identical (features, state) pairs become one weighted row
    def _aggregate(self, X: NDArray, y: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        keys = np.concatenate([X, y[:, None].astype(np.float64)], axis=1)
        uniq, counts = np.unique(keys, axis=0, return_counts=True)
        return uniq[:, :-1], uniq[:, -1].astype(np.int64), counts.astype(np.float64)

    def _fit_one(self, X: NDArray, y: NDArray, lam: float):
        Xu, yu, w = self._aggregate(X, y)
        w = w / w.mean()  # saga's step size misbehaves with large raw counts
        classes = np.unique(yu)
        if len(classes) < 2:
            return ("constant", classes)
        model = LogisticRegression(
            penalty="l1",
            solver="saga",
            C=1.0 / (lam * w.sum()),
            tol=self.tol,
            max_iter=self.max_iter,
            random_state=self.random_state,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            model.fit(indicator_basis(Xu, self.knots_), yu, sample_weight=w)
        return ("logistic", model)

    def _proba(self, fit, X: NDArray) -> NDArray[np.float64]:
        kind, obj = fit
        out = np.zeros((len(X), self.n_states))
        if kind == "constant":
            out[:, obj] = 1.0 / len(obj)
        else:
            out[:, obj.classes_] = obj.predict_proba(indicator_basis(X, self.knots_))
        if (out <= 0).any():
            out = (1.0 - self.kappa) * out + self.kappa / self.n_states
        return out / out.sum(axis=1, keepdims=True)

    def fit(self, X: ArrayLike, y: ArrayLike) -> "HALDensity":
        """Fit on features ``X`` (n, d) and states ``y``, rows in column order."""
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(len(X), -1)
        y = np.asarray(y, dtype=np.int64)
        self.knots_ = np.unique(X, axis=0)
        folds = np.array_split(np.arange(len(X)), self.n_folds)
        cv = np.zeros(len(self.lambdas))
        # a single penalty needs no cross-validation
        for k, lam in enumerate(self.lambdas if len(self.lambdas) > 1 else ()):
            for hold in folds:
                if not len(hold):
                    continue
                train = np.ones(len(X), dtype=bool)
                train[hold] = False
                p = self._proba(self._fit_one(X[train], y[train], lam), X[hold])
                cv[k] += -np.log(p[np.arange(len(hold)), y[hold]]).sum()
        self.cv_loss_ = cv / len(X)
        self.lambda_ = float(self.lambdas[int(np.argmin(self.cv_loss_))])
        self.fit_ = self._fit_one(X, y, self.lambda_)
        return self

    def predict_proba(self, X: ArrayLike) -> NDArray[np.float64]:
        X = np.asarray(X, dtype=np.float64)
        return self._proba(self.fit_, X.reshape(len(X), -1))

    def coef_l1(self) -> float:
        kind, obj = self.fit_
        return 0.0 if kind == "constant" else float(np.abs(obj.coef_).sum())


def _data_xy(spec: Any, data: TrialData) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    cL, _ = observed_contexts(spec, data)
    return cL.ravel(), data.states.ravel()  # row-major in (t, i) = column order


def fit_tabular_mle(spec: Any, data: TrialData, shrinkage: float = DEFAULT_SHRINKAGE) -> FittedDensity:
    codes, states = _data_xy(spec, data)
    est = TabularMLE(spec.n_l_contexts, spec.n_states, shrinkage).fit(codes, states)
    meta = {"shrinkage": shrinkage, "n": int(len(codes)), "counts": est.counts_.astype(int).tolist()}
    return FittedDensity("tabular-mle", est.table_, meta)


def fit_hal_lasso(
    spec: Any,
    data: TrialData,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    n_folds: int = 5,
    seed: int = 0,
) -> FittedDensity:
    """HAL-style fit on the ordinal features of the state contexts."""
    features = getattr(spec.l_summarizer, "features", None)
    if features is None:
        raise UnsupportedError("state summarizer declares no ordinal feature embedding")
    codes, states = _data_xy(spec, data)
    est = HALDensity(spec.n_states, lambdas, n_folds, random_state=seed)
    est.fit(features(codes), states)
    table = TransitionTable(est.predict_proba(features(np.arange(spec.n_l_contexts))))
    meta = {
        "lambda": est.lambda_,
        "lambdas": list(map(float, lambdas)),
        "cv_loss": est.cv_loss_.tolist(),
        "folds": n_folds,
        "n": int(len(codes)),
    }
    return FittedDensity("hal-lasso", table, meta)


# ------------------------------------------------------------------ rate solver


@dataclass(frozen=True)
class ErmRate:
    r_n: float
    residual: float
    headline: float  # n^(-1 / (4 - 2 alpha))
    bracket: tuple[float, float]


def erm_phi(r: float, n: float, alpha: float, p: float) -> float:
    """``r^a/sqrt(n) + log(n) r^(1-p/2)/sqrt(n) + log(n)^2 r^(a-p)/n``."""
    ln = math.log(n)
    return r**alpha / math.sqrt(n) + ln * r ** (1 - p / 2) / math.sqrt(n) + ln**2 * r ** (alpha - p) / n


def _gap(r: float, n: float, alpha: float, p: float) -> float:
    return r * r / 3.0 - erm_phi(r, n, alpha, p)


def erm_rate_rn(
    n: float, alpha: float, p: float, bracket: tuple[float, float] | None = None
) -> ErmRate:
    """Solve ``r^2 / 3 = phi_n(r)`` by bisection.

    Every exponent of ``phi_n`` is below 2, so ``phi_n(r) / r^2`` is strictly
    decreasing and the root is unique; the bracket is widened geometrically
    until the sign changes unless one is supplied.
    """
    if not 0 < alpha < 1 or not 0 < p < 2:
        raise ValueError("need 0 < alpha < 1 and 0 < p < 2")
    if n <= 1:
        raise ValueError("n must exceed 1")
    lo, hi = bracket if bracket is not None else (1e-3, 1.0)
    if bracket is None:
        while _gap(lo, n, alpha, p) >= 0:
            lo /= 2.0
        while _gap(hi, n, alpha, p) <= 0:
            hi *= 2.0
    g_lo, g_hi = _gap(lo, n, alpha, p), _gap(hi, n, alpha, p)
    assert g_lo < 0 < g_hi, f"no sign change on [{lo}, {hi}]"
    r = bisect(_gap, lo, hi, args=(n, alpha, p), xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=4000)
    return ErmRate(float(r), abs(_gap(r, n, alpha, p)), float(n ** (-1.0 / (4.0 - 2.0 * alpha))), (lo, hi))
