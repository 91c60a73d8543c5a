"""Vectorized forward simulation of the structural equations from exogenous uniforms.

Each path ``p`` owns uniforms ``U_A[p, t, i]`` and ``U_L[p, t, i]``; a node's
value is the inverse-CDF draw of its conditional law at that uniform. Since
draws depend only on a path's own uniforms, splitting paths into batches or
forcing a node to a value leaves every other path unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numpy.typing import NDArray

from .core import ModelMismatchError, pad_history
from .scenarios import ScenarioSpec

# (t, A_padded, L_padded) -> (arm table for round t, theta code)
DesignFn = Callable[[int, NDArray, NDArray], tuple[NDArray, int]]


@dataclass(frozen=True)
class Paths:
    """Simulated paths: arrays of shape (P, T, N) plus the arm tables used."""

    actions: NDArray[np.int8]
    states: NDArray[np.int8]
    l_codes: NDArray[np.int64]
    a_codes: NDArray[np.int64]
    tables: NDArray[np.float64]  # (T, n_a_contexts, n_arms)
    theta: NDArray[np.int64]

    def outcome(self, spec: ScenarioSpec, t: int | None = None) -> NDArray[np.float64]:
        """(P,) mean outcome over units after round ``t`` (0-based, default last)."""
        t = self.states.shape[1] - 1 if t is None else t
        return spec.outcome[self.states[:, t, :]].mean(axis=1)


def draw(probs: NDArray, u: NDArray) -> NDArray[np.int64]:
    """Inverse-CDF draw per row; zero-probability categories are never selected."""
    cum = np.cumsum(probs, axis=-1)
    cum /= cum[..., -1:]
    idx = (u[..., None] >= cum[..., :-1]).sum(axis=-1)
    # a trailing run of zero-probability categories can only be hit through rounding
    return np.minimum(idx, np.argmax(cum >= 1.0, axis=-1))


def uniforms(rng: np.random.Generator, n_rounds: int, n_units: int) -> tuple[NDArray, NDArray]:
    """One path's exogenous noise; the draw order is fixed for reproducibility."""
    u = rng.random((2, n_rounds, n_units))
    return u[0], u[1]


def _lookup(table: NDArray, codes: NDArray, what: str) -> NDArray:
    if codes.size and (codes.min() < 0 or codes.max() >= len(table)):
        raise ModelMismatchError(f"{what} context code outside its table")
    return table[codes]


def rollout(
    spec: ScenarioSpec,
    q: NDArray,
    design: NDArray | DesignFn,
    U_A: NDArray,
    U_L: NDArray,
    theta: NDArray | None = None,
    force: Mapping[tuple[int, int], int] | None = None,
) -> Paths:
    """Simulate ``P`` paths of ``T`` rounds.

    Args:
        q: (n_l_contexts, n_states) state kernel.
        design: static (n_a, K) table, per-round (T, n_a, K) tables, or a
            callable returning the table and theta code at each round start.
        U_A, U_L: (P, T, N) uniforms.
        force: map ``(t, i) -> l`` (0-based) overriding drawn states.
    """
    q = np.asarray(q, dtype=np.float64)
    P, T, N = U_A.shape
    if N != spec.n_units:
        raise ValueError(f"uniforms cover {N} units, scenario has {spec.n_units}")
    pad = spec.memory
    Ap, Lp = pad_history(np.zeros((P, T, N), np.int8), np.zeros((P, T, N), np.int8), spec.initial_state, pad)
    cL = np.zeros((P, T, N), dtype=np.int64)
    cA = np.zeros((P, T, N), dtype=np.int64)
    tables = np.zeros((T, spec.n_a_contexts, spec.n_arms))
    thetas = np.zeros(T, dtype=np.int64) if theta is None else np.asarray(theta, dtype=np.int64).copy()
    force = force or {}
    static = None if callable(design) else np.asarray(design, dtype=np.float64)
    lsum, asum = spec.l_summarizer, spec.a_summarizer
    local = spec.unit_local and not force
    for t in range(T):
        tt = pad + t
        if static is None:
            table, thetas[t] = design(t, Ap[:, : tt], Lp[:, : tt])
        else:
            table = static if static.ndim == 2 else static[t]
        tables[t] = table
        th = thetas[t]
        if local:
            codes = asum.codes_all(Ap, Lp, tt, th)
            cA[:, t] = codes
            Ap[:, tt, :] = draw(_lookup(table, codes, "arm"), U_A[:, t, :])
            codes = lsum.codes_all(Ap, Lp, tt, th)
            cL[:, t] = codes
            Lp[:, tt, :] = draw(_lookup(q, codes, "state"), U_L[:, t, :])
            continue
        for i in range(N):
            codes = asum.codes(Ap, Lp, tt, i, th)
            cA[:, t, i] = codes
            Ap[:, tt, i] = draw(_lookup(table, codes, "arm"), U_A[:, t, i])
        for i in range(N):
            codes = lsum.codes(Ap, Lp, tt, i, th)
            cL[:, t, i] = codes
            if (t, i) in force:
                Lp[:, tt, i] = force[(t, i)]
            else:
                Lp[:, tt, i] = draw(_lookup(q, codes, "state"), U_L[:, t, i])
    return Paths(Ap[:, pad:], Lp[:, pad:], cL, cA, tables, thetas)
