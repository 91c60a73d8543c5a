"""Canonical gradient of the target, its variance and the exact remainder.

``D-bar(q)`` is a table over (state context ``c``, state ``l``)::

    D-bar(c, l) = sum_{s <= tau, j} h*_{s,j}(c) / h-bar(c) * (m_{s,j}(c, l) - sum_l' q(l'|c) m_{s,j}(c, l'))

with ``m_{s,j}(c, l) = E_{q,g*}[Y | L(s,j) = l, C(s,j) = c]`` and ``h-bar``
the context law pooled over the trial's ``T x N`` nodes. The products
``h* m`` are carried as numerators, so contexts unreachable under the target
rule contribute nothing. Three routes compute it:

* rep 2: conditional outcomes under the target rule (merged-window program,
  unit-chain recursion, or rollouts with common random numbers);
* rep 1: the path tree under the design, outcomes reweighted by the cumulative
  ratio of target to design arm probabilities;
* rep 3: arm-context weights ``h*_A / h-bar_A`` times ``g* / g`` (independent
  unit chains under a fixed design).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from . import markov
from .core import DesignRule, PositivityError, TransitionTable, TrialData, UnsupportedError, observed_contexts
from .lattice import DEFAULT_BUDGET, Lattice
from .mixing import phi_coefficient
from .rollout import rollout
from .scenarios import ScenarioSpec, Target, as_target
from .simulation import ContextMarginals, context_marginals, design_tables, gcomp_exact, q_table

REPS = (1, 2, 3)


def _design_probs(design: DesignRule | NDArray) -> NDArray[np.float64]:
    return design.probs if isinstance(design, DesignRule) else np.asarray(design, dtype=np.float64)


def _static(design: DesignRule | NDArray) -> NDArray | None:
    """The single arm table of a design that never changes, else None."""
    probs = _design_probs(design)
    if probs.ndim == 2:
        return probs
    return probs[0] if np.all(probs == probs[:1]) else None


def default_rep(spec: ScenarioSpec, design: DesignRule | NDArray) -> int:
    if spec.model_class == "M2" and spec.unit_local and _static(design) is not None:
        return 3
    return 2 if spec.model_class in ("M1", "M2") else 1


# ------------------------------------------------------------------ numerators


def _center(num: NDArray, q: NDArray) -> NDArray[np.float64]:
    return num - np.einsum("cl,cl->c", q, num)[:, None]


def star_numerator(
    spec: ScenarioSpec,
    q: NDArray,
    g_star: NDArray,
    backend: str = "auto",
    budget: float = DEFAULT_BUDGET,
    paths: int = 20_000,
    seed: int = 0,
) -> tuple[NDArray, NDArray, NDArray | None]:
    """Centered numerator summed over target nodes, target context laws, rollout se.

    Returns ``(numc (n_l, S), h_star (tau, N, n_l), se or None)``.
    """
    if spec.model_class == "M":
        raise UnsupportedError("context-conditional outcomes need an M1 or M2 scenario; use rep 1")
    if backend == "auto":
        backend = "markov" if spec.unit_local else "window"
    tau = spec.tau
    if backend == "markov":
        numc, h_l = markov.eif_numerator(spec, q, g_star)
        cm = markov.chain_marginals(spec, q, g_star, tau)
        return numc, cm.per_unit(h_l), None
    if backend == "window":
        lat = Lattice(spec, g_star, tau, merge=True, budget=budget)
        w = lat.forward(q, g_star)
        vals = lat.backward(q, g_star, lat.unit_outcomes(spec.outcome).mean(axis=1, keepdims=True))
        num = np.zeros((spec.n_l_contexts, spec.n_states))
        for s in range(tau):
            for j in range(spec.n_units):
                num += _center(lat.numerators(w, vals, s, j)[..., 0], q)
        return num, lat.marginals(w, "L"), None
    if backend == "mc":
        return _numerator_mc(spec, q, g_star, paths, seed)
    raise ValueError(f"unknown backend {backend!r}")


def _numerator_mc(spec: ScenarioSpec, q: NDArray, g_star: NDArray, paths: int, seed: int):
    """Rollouts sharing uniforms: every forced state ``l`` reuses the same noise."""
    rng = np.random.default_rng(seed)
    tau, N, S = spec.tau, spec.n_units, spec.n_states
    U_A = rng.random((paths, tau, N))
    U_L = rng.random((paths, tau, N))
    tables = design_tables(g_star, tau)
    base = rollout(spec, q, tables, U_A, U_L)
    contrib = np.zeros((paths, spec.n_l_contexts, S))
    rows = np.arange(paths)
    for s in range(tau):
        for j in range(N):
            c = base.l_codes[:, s, j]
            y = np.stack(
                [rollout(spec, q, tables, U_A, U_L, force={(s, j): l}).outcome(spec) for l in range(S)], axis=1
            )
            contrib[rows, c] += y - (q[c] * y).sum(axis=1, keepdims=True)
    h = np.zeros((tau, N, spec.n_l_contexts))
    for s in range(tau):
        for j in range(N):
            h[s, j] = np.bincount(base.l_codes[:, s, j], minlength=spec.n_l_contexts) / paths
    se = contrib.std(axis=0, ddof=1) / np.sqrt(paths)
    return contrib.mean(axis=0), h, se


def ratio_numerator(
    spec: ScenarioSpec, q: NDArray, g_star: NDArray, design: NDArray, budget: float = DEFAULT_BUDGET
) -> tuple[NDArray, NDArray, float]:
    """Rep-1 numerator from the path tree under the design.

    ``sum over tree nodes with context c of P_g(node) E_g[Y * prod g*/g | node, L(s,j) = l]``.
    Returns ``(numc, h (tau, N, n_l) under the design, largest path ratio)``.
    """
    tau = spec.tau
    g = design_tables(design, tau)
    lat = Lattice(spec, g, tau, merge=False, budget=budget)
    w = lat.forward(q, g)
    ratio = lat.path_ratio(g_star, g, weights=w)
    y = lat.unit_outcomes(spec.outcome).mean(axis=1) * ratio
    vals = lat.backward(q, g, y[:, None])
    num = np.zeros((spec.n_l_contexts, spec.n_states))
    for s in range(tau):
        for j in range(spec.n_units):
            num += _center(lat.numerators(w, vals, s, j)[..., 0], q)
    return num, lat.marginals(w, "L"), float(ratio[w[-1] > 0].max(initial=0.0))


# ----------------------------------------------------------------------- tables


@dataclass(frozen=True)
class EifTable:
    """``D-bar`` over (state context, state) with the laws it was built from.

    ``dbar_inf`` replaces the pooled law by the tail law (last quarter of
    rounds), the plug-in for the limit gradient.
    """

    dbar: NDArray[np.float64]
    dbar_inf: NDArray[np.float64]
    q: NDArray[np.float64]
    h_bar: NDArray[np.float64]
    h_inf: NDArray[np.float64]
    rep: int
    backend: str
    n_rounds: int
    info: dict[str, Any] = field(default_factory=dict)

    def values(self, codes: NDArray, states: NDArray) -> NDArray[np.float64]:
        return self.dbar[codes, states]

    @property
    def variance(self) -> float:
        """``sum_c h-bar(c) sum_l q(l|c) D-bar(c,l)^2``."""
        return float(self.h_bar @ (self.q * self.dbar**2).sum(axis=1))

    @property
    def variance_inf(self) -> float:
        return float(self.h_inf @ (self.q * self.dbar_inf**2).sum(axis=1))

    def conditional_mean(self) -> NDArray[np.float64]:
        """``sum_l q(l|c) D-bar(c, l)`` per context."""
        return (self.q * self.dbar).sum(axis=1)


def _divide(num: NDArray, den: NDArray) -> NDArray[np.float64]:
    den = np.broadcast_to(den[:, None], num.shape)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def eif_table(
    spec: ScenarioSpec,
    q: TransitionTable | NDArray | None,
    design: DesignRule | NDArray,
    T: int,
    rep: int | None = None,
    backend: str = "auto",
    target: DesignRule | Target | None = None,
    theta: NDArray | None = None,
    marginals: ContextMarginals | None = None,
    budget: float = DEFAULT_BUDGET,
    paths: int = 20_000,
    seed: int = 0,
) -> EifTable:
    """``D-bar(q)`` for a trial of ``T`` rounds run under ``design``.

    ``design`` is a rule or a per-round (T, n_a, K) schedule; ``marginals``
    may supply precomputed state-context laws under (q, design).

    Raises:
        UnsupportedError: rep 2 on a base-model scenario, rep 3 outside
            independent unit chains under a fixed design.
        PositivityError: the target needs an arm the design never plays.
    """
    qt = q_table(q, spec)
    rep = default_rep(spec, design) if rep is None else rep
    if rep not in REPS:
        raise ValueError(f"rep must be one of {REPS}")
    targets = spec.target() if target is None else as_target(target)
    if marginals is None:
        marginals = context_marginals(
            spec, design, T, qt, "mc" if backend == "mc" else "auto", "L", theta, paths, seed, budget
        )
    h_bar, h_inf = marginals.h_bar, marginals.h_inf
    info: dict[str, Any] = {}
    if rep == 3:
        g = _static(design)
        if g is None or not (spec.unit_local and spec.model_class == "M2"):
            raise UnsupportedError("rep 3 needs independent unit chains under a fixed design")
        marg_a = context_marginals(spec, design, T, qt, kind="A", theta=theta)
        dbar = np.zeros_like(qt)
        dbar_inf = np.zeros_like(qt)
        for w, gs in targets:
            d, omega, eta = markov.eif_rep3(spec, qt, gs.probs, g, marg_a.h_bar)
            dbar += w * d
            dbar_inf += w * markov.eif_rep3(spec, qt, gs.probs, g, marg_a.h_inf)[0]
        info["max_eta"] = float(eta.max())
        return EifTable(dbar, dbar_inf, qt, h_bar, h_inf, 3, "markov", T, info)
    if backend == "auto":
        backend = "markov" if spec.unit_local else "window"
    if rep == 1:
        backend = "tree"
    numc = np.zeros_like(qt)
    ratio = 0.0
    for w, gs in targets:
        if rep == 2:
            n, h_star, se = star_numerator(spec, qt, gs.probs, backend, budget, paths, seed)
            if se is not None:
                info["rollout_se_max"] = max(info.get("rollout_se_max", 0.0), float(np.abs(w) * se.max()))
        else:
            n, h_star, r = ratio_numerator(spec, qt, gs.probs, _design_probs(design), budget)
            ratio = max(ratio, r)
        numc += w * n
        star = h_star.sum(axis=(0, 1))
        if np.any((star > 0) & (h_bar <= 0)):
            raise PositivityError("a context reachable under the target rule never occurs under the design")
        info["max_density_ratio"] = max(
            info.get("max_density_ratio", 0.0), float(_divide(h_star.reshape(-1, len(h_bar)).T, h_bar).max())
        )
    if rep == 1:
        info["max_path_ratio"] = ratio
    return EifTable(_divide(numc, h_bar), _divide(numc, h_inf), qt, h_bar, h_inf, rep, backend, T, info)


# ----------------------------------------------------------------------- bundles


@dataclass(frozen=True)
class EifBundle:
    """Per-node gradient values on observed data and their summaries."""

    table: EifTable
    codes: NDArray[np.int64]  # (T, N)
    states: NDArray[np.int64]
    values: NDArray[np.float64]  # (T, N)

    @property
    def rep(self) -> int:
        return self.table.rep

    @property
    def pn(self) -> float:
        """Empirical mean ``P_n D-bar`` over all nodes."""
        return float(self.values.mean())

    @property
    def sigma2(self) -> float:
        return eif_variance(self)[0]

    @property
    def sigma2_inf(self) -> float:
        return self.table.variance_inf

    def to_csv(self, path: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "i", "c", "l", "dbar"])
        T, N = self.values.shape
        for t in range(T):
            for i in range(N):
                w.writerow([t + 1, i + 1, int(self.codes[t, i]), int(self.states[t, i]), repr(float(self.values[t, i]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def eif_components(
    spec: ScenarioSpec,
    q: TransitionTable | NDArray | None,
    data: TrialData,
    design: DesignRule | NDArray | None = None,
    rep: int | None = None,
    backend: str = "auto",
    target: DesignRule | Target | None = None,
    table: EifTable | None = None,
    **kwargs: Any,
) -> EifBundle:
    """Evaluate ``D-bar(q)`` at every observed node.

    The design defaults to the schedule recorded in ``data``; marginals are
    computed under ``q`` and that design over the data's rounds.
    """
    if table is None:
        if design is None:
            if data.design_schedule is None:
                raise ValueError("no design given and the data carry no design schedule")
            design = data.design_schedule
        table = eif_table(spec, q, design, data.n_rounds, rep, backend, target, theta=data.theta, **kwargs)
    codes, _ = observed_contexts(spec, data)
    states = np.asarray(data.states, dtype=np.int64)
    return EifBundle(table, codes, states, table.values(codes, states))


def eif_variance(bundle: EifBundle) -> tuple[float, float]:
    """Empirical variance of the node values and the tail-law plug-in variance."""
    if bundle.values.size < 2:
        raise ValueError("variance needs at least two nodes")
    return float(bundle.values.var()), bundle.table.variance_inf


# --------------------------------------------------------------------- remainder


@dataclass(frozen=True)
class RemainderReport:
    """``R(q, q0) = Psi(q) - Psi(q0) + E_0 D(q)`` and its decompositions.

    ``marginal_part + telescoping_part`` is the split into a context-law
    difference and a second-order product of kernel differences;
    ``arm_weight_form`` is the single product of arm-weight and kernel
    differences available for independent unit chains (None otherwise).
    """

    value: float
    psi_q: float
    psi_0: float
    drift: float
    marginal_part: float
    telescoping_part: float
    arm_weight_form: float | None
    cross_terms: dict[str, float] | None = None


def _telescoping(spec: ScenarioSpec, q: NDArray, q0: NDArray, g_star: NDArray, budget: float) -> float:
    """``sum_{s,j} E_q[ sum_l (q - q0)(l|C) (V_q0 - V_q)(child l) ]`` at target nodes."""
    lat = Lattice(spec, g_star, spec.tau, merge=True, budget=budget)
    w = lat.forward(q, g_star)
    y = lat.unit_outcomes(spec.outcome).mean(axis=1, keepdims=True)
    vq = lat.backward(q, g_star, y)
    v0 = lat.backward(q0, g_star, y)
    total = 0.0
    for k, level in enumerate(lat.levels):
        if level.kind != "L":
            continue
        diff = (v0[k + 1] - vq[k + 1])[level.children][..., 0]  # (n_p, S)
        total += float(w[k] @ ((q - q0)[level.codes] * diff).sum(axis=1))
    return total


def _arm_weight_form(
    spec: ScenarioSpec, q: NDArray, q0: NDArray, g_star: NDArray, design: NDArray, T: int
) -> tuple[float, dict[str, float]]:
    """Closed form for independent chains, plus the telescoping cross-term check.

    ``R = sum_s sum_cA h-bar0_A (omega_s - omega0_s) sum_a g* sum_l (q0 - q) v_s``
    with ``omega_s = mean_j h*_{s,j,A} / h-bar_A`` and ``v_s`` the value of a
    state at round ``s`` under q.
    """
    K, S, tau = spec.n_arms, spec.n_states, spec.tau
    n_a = spec.n_a_contexts
    bar = markov.chain_marginals(spec, q, design, T)
    bar0 = markov.chain_marginals(spec, q0, design, T)
    star = markov.chain_marginals(spec, q, g_star, tau)
    star0 = markov.chain_marginals(spec, q0, g_star, tau)
    hbar_a = bar.pooled(bar.h_a)
    hbar0_a = bar0.pooled(bar0.h_a)
    omega = np.divide(np.einsum("sgc,g->sc", star.h_a, star.weights), hbar_a, out=np.zeros((tau, n_a)), where=hbar_a > 0)
    omega0 = np.divide(
        np.einsum("sgc,g->sc", star0.h_a, star0.weights), hbar0_a, out=np.zeros((tau, n_a)), where=hbar0_a > 0
    )
    v = markov.outcome_values(spec, q, g_star)  # (tau, S)
    dq = (q0 - q).reshape(K, n_a, S)
    inner = np.einsum("ck,kcl,sl->sc", g_star, dq, v)  # (tau, n_a)
    value = float(np.sum(hbar0_a[None, :] * (omega - omega0) * inner))
    # per-unit cross terms of the telescoping sum: first uses q0 at round s, second uses q
    qs = q.reshape(K, n_a, S)
    q0s = q0.reshape(K, n_a, S)
    first = np.einsum("sgc,ck,kcl,sl->sg", star0.h_a, g_star, q0s, v)
    second = np.einsum("sgc,ck,kcl,sl->sg", star0.h_a, g_star, qs, v)
    psi_q = markov.target_value(spec, q, g_star)
    psi_0 = markov.target_value(spec, q0, g_star)
    w = star0.weights
    checks = {
        "shift": float(np.abs(second[1:] - first[:-1]).max(initial=0.0)),
        "start": abs(float(second[0] @ w) - psi_q),
        "end": abs(float(first[-1] @ w) - psi_0),
    }
    return value, checks


def remainder_exact(
    spec: ScenarioSpec,
    q: TransitionTable | NDArray,
    design: DesignRule | NDArray,
    T: int,
    q0: TransitionTable | NDArray | None = None,
    target: DesignRule | Target | None = None,
    budget: float = DEFAULT_BUDGET,
) -> RemainderReport:
    """Exact second-order remainder of the first-order expansion at ``q``.

    ``E_0 D(q) = sum_c h-bar0(c) sum_l q0(l|c) D-bar(q)(c, l)`` with ``h-bar0``
    the pooled context law of the trial under ``q0`` and the design.
    """
    qt, q0t = q_table(q, spec), q_table(q0, spec)
    targets = spec.target() if target is None else as_target(target)
    backend = "markov" if spec.unit_local else "window"
    table = eif_table(spec, qt, design, T, rep=2, backend=backend, target=targets, budget=budget)
    h0 = context_marginals(spec, design, T, q0t, budget=budget).h_bar
    psi_q = gcomp_exact(spec, targets, q=qt, budget=budget).value
    psi_0 = gcomp_exact(spec, targets, q=q0t, budget=budget).value
    drift = float(h0 @ (q0t * table.dbar).sum(axis=1))
    numc = table.dbar * table.h_bar[:, None]
    gap = np.divide(h0 - table.h_bar, table.h_bar, out=np.zeros_like(h0), where=table.h_bar > 0)
    marginal = float(gap @ ((q0t - qt) * numc).sum(axis=1))
    telescoping = sum(w * _telescoping(spec, qt, q0t, g.probs, budget) for w, g in targets)
    arm_form = None
    cross = None
    g_static = _static(design)
    if spec.unit_local and spec.model_class == "M2" and g_static is not None:
        arm_form = 0.0
        cross = {"shift": 0.0, "start": 0.0, "end": 0.0}
        for w, g in targets:
            val, chk = _arm_weight_form(spec, qt, q0t, g.probs, g_static, T)
            arm_form += w * val
            cross = {k: max(cross[k], chk[k]) for k in cross}
    return RemainderReport(psi_q - psi_0 + drift, psi_q, psi_0, drift, marginal, float(telescoping), arm_form, cross)


def epsilon_sweep(
    spec: ScenarioSpec,
    q1: TransitionTable | NDArray,
    design: DesignRule | NDArray,
    T: int,
    eps: tuple[float, ...] = (0.1, 0.05, 0.025, 0.0125),
) -> tuple[float, NDArray[np.float64]]:
    """Log-log slope of ``|R(q_eps, q0)|`` along ``q_eps = (1 - eps) q0 + eps q1``."""
    q0 = spec.q0.probs
    q1 = q_table(q1, spec)
    r = np.array([abs(remainder_exact(spec, (1 - e) * q0 + e * q1, design, T).value) for e in eps])
    slope = float(np.polyfit(np.log(eps), np.log(r), 1)[0])
    return slope, r


# ------------------------------------------------------------------ boundedness


@dataclass(frozen=True)
class BoundCheck:
    """``max |D-bar(q0)|`` against ``2 tau B phi`` for a binary outcome."""

    max_dbar: float
    ratio_bound: float  # max h*_{s,j}(c) / h-bar(c)
    phi_sum: float  # max over (s, k) of sum_j phi(Y(k), (L(s,j), C(s,j)))
    bound: float

    @property
    def holds(self) -> bool:
        return self.max_dbar <= self.bound * (1 + 1e-12)


def boundedness_check(
    spec: ScenarioSpec, design: DesignRule | NDArray, T: int, budget: float = DEFAULT_BUDGET
) -> BoundCheck:
    """Exact ingredients of the gradient bound on a tiny instance.

    ``phi(Y(k), X)`` is computed from the joint law of the final state
    indicator of unit ``k`` and ``X = (context, state)`` at each target node.
    """
    if not np.array_equal(np.unique(spec.outcome), [0.0, 1.0]) or spec.n_states != 2:
        raise UnsupportedError("the bound is checked for binary outcomes only")
    q0 = spec.q0.probs
    g_star = spec.g_star.probs
    table = eif_table(spec, q0, design, T, rep=2, backend="window", budget=budget)
    lat = Lattice(spec, g_star, spec.tau, merge=True, budget=budget)
    w = lat.forward(q0, g_star)
    ones = lat.unit_outcomes(spec.outcome)  # (n_final, N) indicators of Y(k) = 1
    vals = lat.backward(q0, g_star, ones)
    h_star = lat.marginals(w, "L")
    ratio = float(max(_divide(h_star[s, j][:, None], table.h_bar).max() for s in range(spec.tau) for j in range(spec.n_units)))
    N = spec.n_units
    phis = np.zeros((spec.tau, N, N))  # (s, j, k)
    for s in range(spec.tau):
        for j in range(N):
            p1 = lat.numerators(w, vals, s, j)  # (n_l, S, N): P(c, l, Y(k) = 1)
            pcl = h_star[s, j][:, None] * q0  # P(c, l)
            for k in range(N):
                joint = np.stack([(pcl - p1[..., k]).ravel(), p1[..., k].ravel()], axis=1)
                joint = np.clip(joint, 0.0, None)
                phis[s, j, k] = phi_coefficient(joint / joint.sum())
    phi_sum = float(phis.sum(axis=1).max())
    support = q0 > 0
    max_dbar = float(np.abs(table.dbar[support]).max())
    return BoundCheck(max_dbar, ratio, phi_sum, 2 * spec.tau * ratio * phi_sum)
