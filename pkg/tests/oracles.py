"""Brute-force reference computations by depth-first path enumeration.

Nothing here touches the package's enumeration engines; only the scenario's
summarizers are reused to read contexts off a partial history.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass
class Path:
    prob: float
    A: np.ndarray  # (T, N)
    L: np.ndarray
    cA: np.ndarray
    cL: np.ndarray
    ratio: float = 1.0  # product of num/den arm probabilities when a second rule is given


def enumerate_paths(spec, q, tables, T, ratio_tables=None):
    """All positive-probability trajectories of T rounds, nodes drawn in column order.

    ``tables`` is (T, n_a, K) or (n_a, K). ``ratio_tables`` (same shape) makes
    each path carry prod ratio_tables/tables over its arm nodes.
    """
    N, pad = spec.n_units, spec.memory
    tables = np.broadcast_to(np.asarray(tables, float), (T, spec.n_a_contexts, spec.n_arms)) if np.ndim(tables) == 2 else np.asarray(tables, float)
    if ratio_tables is not None and np.ndim(ratio_tables) == 2:
        ratio_tables = np.broadcast_to(np.asarray(ratio_tables, float), tables.shape)
    A = np.zeros((1, pad + T, N), dtype=np.int8)
    L = np.zeros((1, pad + T, N), dtype=np.int8)
    L[0, :pad, :] = spec.initial_state
    cA = np.zeros((T, N), dtype=np.int64)
    cL = np.zeros((T, N), dtype=np.int64)
    out = []
    order = [nd for t in range(T) for nd in [(t, "A", i) for i in range(N)] + [(t, "L", i) for i in range(N)]]

    def rec(k, prob, ratio):
        if prob == 0.0:
            return
        if k == len(order):
            out.append(Path(prob, A[0, pad:].astype(int).copy(), L[0, pad:].astype(int).copy(), cA.copy(), cL.copy(), ratio))
            return
        t, kind, i = order[k]
        tt = pad + t
        if kind == "A":
            c = int(spec.summarize(A, L, tt, i, "A", 0)[0])
            cA[t, i] = c
            for a in range(spec.n_arms):
                p = tables[t, c, a]
                if p == 0:
                    continue
                r = ratio
                if ratio_tables is not None:
                    r = ratio * ratio_tables[t, c, a] / p
                A[0, tt, i] = a
                rec(k + 1, prob * p, r)
            A[0, tt, i] = 0
        else:
            c = int(spec.summarize(A, L, tt, i, "L", 0)[0])
            cL[t, i] = c
            for l in range(spec.n_states):
                L[0, tt, i] = l
                rec(k + 1, prob * q[c, l], ratio)
            L[0, tt, i] = 0

    rec(0, 1.0, 1.0)
    return out


def outcome(spec, path, tau):
    return float(np.mean(spec.outcome[path.L[tau - 1]]))


def gcomp(spec, g, tau, q=None):
    q = spec.q0.probs if q is None else q
    return sum(p.prob * outcome(spec, p, tau) for p in enumerate_paths(spec, q, g, tau))


def marginals(spec, paths, T, kind="L"):
    n = spec.n_l_contexts if kind == "L" else spec.n_a_contexts
    h = np.zeros((T, spec.n_units, n))
    for p in paths:
        codes = p.cL if kind == "L" else p.cA
        for t, i in itertools.product(range(T), range(spec.n_units)):
            h[t, i, codes[t, i]] += p.prob
    return h


def _gain_table(spec, paths, tau, s, j, weight_ratio=False):
    """E[Y w | L(s,j)=l, C=c] - E[Y w | C=c] for every (c, l) with C reachable; 0 elsewhere."""
    nc, S = spec.n_l_contexts, spec.n_states
    num_cl, den_cl = np.zeros((nc, S)), np.zeros((nc, S))
    for p in paths:
        y = outcome(spec, p, tau) * (p.ratio if weight_ratio else 1.0)
        c, l = p.cL[s, j], p.L[s, j]
        num_cl[c, l] += p.prob * y
        den_cl[c, l] += p.prob
    den_c = den_cl.sum(axis=1)
    cond_c = np.divide(num_cl.sum(axis=1), den_c, out=np.zeros(nc), where=den_c > 0)
    cond_cl = np.divide(num_cl, den_cl, out=np.zeros((nc, S)), where=den_cl > 0)
    return np.where(den_cl > 0, cond_cl - cond_c[:, None], 0.0), den_c


def dbar_rep2(spec, q, design, T, g_star=None):
    """Gradient table from its definition: sum over target nodes of h*/h-bar times the centred conditional outcome."""
    g_star = spec.g_star.probs if g_star is None else g_star
    tau = spec.tau
    h_bar = marginals(spec, enumerate_paths(spec, q, design, T), T).mean(axis=(0, 1))
    star = enumerate_paths(spec, q, g_star, tau)
    out = np.zeros((spec.n_l_contexts, spec.n_states))
    for s, j in itertools.product(range(tau), range(spec.n_units)):
        gain, h_star = _gain_table(spec, star, tau, s, j)
        out += np.divide(h_star, h_bar, out=np.zeros_like(h_bar), where=h_bar > 0)[:, None] * gain
    return out


def dbar_rep1(spec, q, design, T, g_star=None):
    """Importance-weighted form: conditional means of Y * prod g*/g under the design."""
    g_star = spec.g_star.probs if g_star is None else g_star
    tau = spec.tau
    h_bar = marginals(spec, enumerate_paths(spec, q, design, T), T).mean(axis=(0, 1))
    obs = enumerate_paths(spec, q, design, tau, ratio_tables=g_star)
    out = np.zeros((spec.n_l_contexts, spec.n_states))
    for s, j in itertools.product(range(tau), range(spec.n_units)):
        gain, h_sj = _gain_table(spec, obs, tau, s, j, weight_ratio=True)
        out += np.divide(h_sj, h_bar, out=np.zeros_like(h_bar), where=h_bar > 0)[:, None] * gain
    return out


def remainder(spec, q, design, T):
    """``Psi(q) - Psi(q0) + E_0[D(q)]`` with every term enumerated."""
    q0 = spec.q0.probs
    g = spec.g_star.probs
    dq = dbar_rep2(spec, q, design, T)
    h0 = marginals(spec, enumerate_paths(spec, q0, design, T), T).mean(axis=(0, 1))
    return gcomp(spec, g, spec.tau, q) - gcomp(spec, g, spec.tau, q0) + float(h0 @ (q0 * dq).sum(axis=1))


def alpha_events(joint):
    """max |P(X in A, Y in B) - P(X in A) P(Y in B)| over all event pairs."""
    joint = np.asarray(joint, float)
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    best = 0.0
    for ma in itertools.product([0, 1], repeat=joint.shape[0]):
        a = np.array(ma, bool)
        for mb in itertools.product([0, 1], repeat=joint.shape[1]):
            b = np.array(mb, bool)
            best = max(best, abs(joint[np.ix_(a, b)].sum() - px[a].sum() * py[b].sum()))
    return best


def stationary(P):
    """Stationary law of a row-stochastic matrix by solving pi (P - I) = 0, sum pi = 1."""
    n = len(P)
    M = np.vstack([(P - np.eye(n)).T, np.ones(n)])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    return np.linalg.lstsq(M, rhs, rcond=None)[0]
