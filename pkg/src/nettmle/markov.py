"""Closed-form propagation for scenarios whose units are independent chains.

Applies when both summarizers are unit-local (state context ``(a, theta,
l_prev)``, arm context ``(theta, l_prev)``): every unit's state is then a
Markov chain with kernel ``P_t[l, l'] = sum_a g_t(a | theta_t, l) q(l' | a,
theta_t, l)``, and all marginals and conditional outcomes follow from
products of these ``S x S`` matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import UnsupportedError
from .scenarios import ScenarioSpec


def require_unit_local(spec: ScenarioSpec) -> None:
    if not spec.unit_local:
        raise UnsupportedError(f"scenario {spec.name!r} is not a set of independent unit chains")


def arm_schedule(tables: NDArray, horizon: int) -> NDArray[np.float64]:
    tables = np.asarray(tables, dtype=np.float64)
    if tables.ndim == 2:
        return np.broadcast_to(tables, (horizon, *tables.shape))
    if len(tables) < horizon:
        raise ValueError(f"design schedule covers {len(tables)} rounds, {horizon} needed")
    return tables[:horizon]


def kernels(spec: ScenarioSpec, q: NDArray, tables: NDArray, theta: NDArray) -> NDArray[np.float64]:
    """(T, S, S) one-step state kernels under per-round arm tables."""
    S, K = spec.n_states, spec.n_arms
    n_a = spec.n_a_contexts
    q3 = np.asarray(q).reshape(K, n_a, S)
    rows = theta[:, None] * S + np.arange(S)[None, :]  # (T, S) arm-context codes
    g = np.take_along_axis(tables, rows[:, :, None], axis=1)  # (T, S, K)
    qa = q3[:, rows, :]  # (K, T, S, S')
    return np.einsum("tsk,ktsl->tsl", g, qa)


@dataclass(frozen=True)
class ChainMarginals:
    """Per-round state and context laws of independent unit chains.

    ``prev[t, u]`` is the law of the state entering round ``t`` (0-based) for
    units with initial state ``groups[u]``; ``weights[u]`` is the fraction of
    units in that group.
    """

    prev: NDArray[np.float64]  # (T + 1, G, S)
    h_l: NDArray[np.float64]  # (T, G, n_l)
    h_a: NDArray[np.float64]  # (T, G, n_a)
    groups: NDArray[np.int64]
    weights: NDArray[np.float64]
    unit_group: NDArray[np.int64]

    def per_unit(self, table: NDArray) -> NDArray:
        """Expand a (T, G, ...) table to (T, N, ...)."""
        return table[:, self.unit_group]

    def pooled(self, table: NDArray) -> NDArray:
        """Average over rounds and units of a (T, G, n) table."""
        return np.einsum("tgn,g->n", table, self.weights) / table.shape[0]

    def tail(self, table: NDArray, frac: float = 0.25) -> NDArray:
        T = table.shape[0]
        k = max(1, int(T * frac))
        return np.einsum("tgn,g->n", table[T - k :], self.weights) / k


def chain_marginals(
    spec: ScenarioSpec, q: NDArray, tables: NDArray, horizon: int, theta: NDArray | None = None
) -> ChainMarginals:
    require_unit_local(spec)
    S, K = spec.n_states, spec.n_arms
    n_a = spec.n_a_contexts
    tables = arm_schedule(tables, horizon)
    theta = np.zeros(horizon, dtype=np.int64) if theta is None else np.asarray(theta[:horizon], dtype=np.int64)
    groups, unit_group, counts = np.unique(spec.initial_state, return_inverse=True, return_counts=True)
    weights = counts / counts.sum()
    P = kernels(spec, q, tables, theta)
    prev = np.zeros((horizon + 1, len(groups), S))
    prev[0, np.arange(len(groups)), groups] = 1.0
    for t in range(horizon):
        prev[t + 1] = prev[t] @ P[t]
    h_a = np.zeros((horizon, len(groups), n_a))
    rows = theta[:, None] * S + np.arange(S)[None, :]
    np.put_along_axis(h_a, np.broadcast_to(rows[:, None, :], (horizon, len(groups), S)), prev[:horizon], axis=2)
    g = np.take_along_axis(tables, rows[:, :, None], axis=1)  # (T, S, K)
    h_l = np.zeros((horizon, len(groups), K, n_a))
    joint = prev[:horizon, :, :, None] * g[:, None, :, :]  # (T, G, S, K)
    for t in range(horizon):
        h_l[t][:, :, rows[t]] = np.transpose(joint[t], (0, 2, 1))
    return ChainMarginals(prev, h_l.reshape(horizon, len(groups), K * n_a), h_a, groups, weights, unit_group.ravel())


def outcome_values(spec: ScenarioSpec, q: NDArray, g_star: NDArray) -> NDArray[np.float64]:
    """``v[s, l] = E[f(L(tau)) | L(s) = l]`` under the target rule, s = 0..tau-1 (0-based)."""
    tau = spec.tau
    P = kernels(spec, q, arm_schedule(g_star, tau), np.zeros(tau, dtype=np.int64))
    v = np.zeros((tau, spec.n_states))
    v[tau - 1] = spec.outcome
    for s in range(tau - 2, -1, -1):
        v[s] = P[s + 1] @ v[s + 1]
    return v


def target_value(spec: ScenarioSpec, q: NDArray, g_star: NDArray) -> float:
    cm = chain_marginals(spec, q, g_star, spec.tau)
    return float(cm.weights @ (cm.prev[spec.tau] @ spec.outcome))


def target_value_at(spec: ScenarioSpec, q: NDArray, g_star: NDArray, horizon: int) -> NDArray[np.float64]:
    """Mean outcome after each of rounds 1..horizon under the target rule."""
    cm = chain_marginals(spec, q, g_star, horizon)
    return (cm.prev[1:] @ spec.outcome) @ cm.weights


def centered_gains(spec: ScenarioSpec, q: NDArray, v: NDArray) -> NDArray[np.float64]:
    """``v[s, l] - sum_l' q(l' | c) v[s, l']`` for every context: (tau, n_l, S)."""
    return v[:, None, :] - np.einsum("cl,sl->sc", q, v)[:, :, None]


def eif_numerator(spec: ScenarioSpec, q: NDArray, g_star: NDArray) -> tuple[NDArray, NDArray]:
    """Centered numerator ``sum_{s,j} h*_{s,j}(c) (m(c,l) - E_q m(c,.))`` and ``h*``.

    Only the unit's own outcome varies with its state, so ``m(c, l)`` enters
    through ``v[s, l] / N``; the other units' means cancel after centering.
    """
    star = chain_marginals(spec, q, g_star, spec.tau)
    v = outcome_values(spec, q, g_star)
    gains = centered_gains(spec, q, v)  # (tau, n_l, S)
    h_star = np.einsum("sgc,g->sc", star.h_l, star.weights)  # unit average
    numc = np.einsum("sc,scl->cl", h_star, gains)
    return numc, star.h_l


def eif_rep3(
    spec: ScenarioSpec, q: NDArray, g_star: NDArray, g: NDArray, h_bar_a: NDArray
) -> tuple[NDArray, NDArray, NDArray]:
    """Arm-level form: ``sum_s omega_s(c_A) eta(a | c_A) (v_s(l) - E_q v_s)``.

    Returns (dbar table, omega (tau, G, n_a), eta (n_a, K)).
    """
    star = chain_marginals(spec, q, g_star, spec.tau)
    v = outcome_values(spec, q, g_star)
    gains = centered_gains(spec, q, v)
    K, n_a = spec.n_arms, spec.n_a_contexts
    omega = np.divide(star.h_a, h_bar_a[None, None, :], out=np.zeros_like(star.h_a), where=h_bar_a > 0)
    g = np.asarray(g, dtype=np.float64)
    eta = np.divide(g_star, g, out=np.zeros_like(g), where=g > 0)
    if np.any((g_star > 0) & (g <= 0) & (h_bar_a[:, None] > 0)):
        from .core import PositivityError

        raise PositivityError("target arm has zero design probability in a visited arm context")
    w = np.einsum("sgc,g->sc", omega, star.weights)  # (tau, n_a)
    weight = (w[:, None, :] * eta.T[None, :, :]).reshape(spec.tau, K * n_a)  # code a * n_a + c_A
    dbar = np.einsum("sc,scl->cl", weight, gains)
    return dbar, omega, eta
