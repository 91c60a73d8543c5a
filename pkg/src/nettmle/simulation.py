"""Trial simulation, G-computation and context marginals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from . import markov
from .core import DesignRule, TrialData, TransitionTable, UnsupportedError
from .lattice import DEFAULT_BUDGET, Lattice
from .rollout import Paths, rollout, uniforms
from .scenarios import ScenarioSpec, Target, as_target

AdaptiveHook = Callable[[int, TrialData, DesignRule], "DesignRule | None"]


@dataclass(frozen=True)
class GcompResult:
    """A value of the target with its Monte Carlo error (0 when exact)."""

    value: float
    se: float
    method: str
    paths: int
    truncation_bound: float = 0.0
    horizon: int = 0


@dataclass(frozen=True)
class ContextMarginals:
    """Context laws per node, pooled over the trial and over its tail.

    ``h[t, i]`` is the law of the context of node (t+1, i+1); ``h_bar`` the
    average over all nodes; ``h_inf`` the average over the last quarter of
    rounds, used as a proxy for the limit law.
    """

    h: NDArray[np.float64]
    h_bar: NDArray[np.float64]
    h_inf: NDArray[np.float64]
    kind: str = "L"
    method: str = "exact"
    paths: int = 0

    @property
    def n_rounds(self) -> int:
        return int(self.h.shape[0])


def q_table(q: TransitionTable | NDArray | None, spec: ScenarioSpec) -> NDArray[np.float64]:
    if q is None:
        return spec.q0.probs
    # fitted densities carry their table as ``probs``
    probs = getattr(q, "probs", q)
    return np.asarray(probs, dtype=np.float64)


def design_tables(design: DesignRule | NDArray, n_rounds: int) -> NDArray[np.float64]:
    """(T, n_a, K) per-round arm tables from a rule or a schedule."""
    probs = design.probs if isinstance(design, DesignRule) else np.asarray(design, dtype=np.float64)
    return markov.arm_schedule(probs, n_rounds)


def tail_window(n_rounds: int, frac: float = 0.25) -> int:
    return max(1, int(n_rounds * frac))


# --------------------------------------------------------------------- simulation


def simulate_trial(
    spec: ScenarioSpec,
    design: DesignRule | NDArray,
    T: int,
    N: int | None = None,
    seed: int | np.random.SeedSequence = 0,
    adaptive_hook: AdaptiveHook | None = None,
    q: TransitionTable | NDArray | None = None,
) -> TrialData:
    """Draw one trial of ``T`` rounds: arms from the design, states from ``q0``.

    ``adaptive_hook(t, data, rule)`` runs before every round ``t >= 2`` with
    the data of rounds ``1..t-1`` and may return a replacement rule.
    """
    if N is not None:
        spec = spec.with_units(N)
    rng = np.random.default_rng(seed)
    U_A, U_L = uniforms(rng, T, spec.n_units)
    qt = q_table(q, spec)
    if adaptive_hook is None:
        tables = design_tables(design, T)
        paths = rollout(spec, qt, tables, U_A[None], U_L[None])
        return _to_data(spec, paths, 0, store_schedule=not isinstance(design, DesignRule))
    if not isinstance(design, DesignRule):
        raise TypeError("adaptive trials start from a DesignRule")
    state = {"rule": design}
    used: list[NDArray] = []
    pad = spec.memory

    def step(t: int, Ap: NDArray, Lp: NDArray) -> tuple[NDArray, int]:
        if t > 0:
            seen = TrialData(
                Ap[0, pad:],
                Lp[0, pad:],
                spec.n_arms,
                spec.n_states,
                spec.initial_state,
                np.zeros(t, np.int64),
                np.stack(used),
            )
            new = adaptive_hook(t + 1, seen, state["rule"])
            if new is not None:
                state["rule"] = new
        used.append(state["rule"].probs)
        return state["rule"].probs, state["rule"].theta_code

    paths = rollout(spec, qt, step, U_A[None], U_L[None])
    return _to_data(spec, paths, 0, store_schedule=True)


def _to_data(spec: ScenarioSpec, paths: Paths, p: int, store_schedule: bool) -> TrialData:
    return TrialData(
        paths.actions[p].astype(np.int64),
        paths.states[p].astype(np.int64),
        spec.n_arms,
        spec.n_states,
        spec.initial_state,
        paths.theta,
        paths.tables if store_schedule else None,
    )


def simulate_many(
    spec: ScenarioSpec,
    design: DesignRule | NDArray,
    T: int,
    seeds: Sequence[int | np.random.SeedSequence],
    q: TransitionTable | NDArray | None = None,
) -> list[TrialData]:
    """Trials for a fixed design, one per seed; equal to ``simulate_trial`` per seed."""
    if not seeds:
        return []
    draws = [uniforms(np.random.default_rng(s), T, spec.n_units) for s in seeds]
    U_A = np.stack([d[0] for d in draws])
    U_L = np.stack([d[1] for d in draws])
    paths = rollout(spec, q_table(q, spec), design_tables(design, T), U_A, U_L)
    store = not isinstance(design, DesignRule)
    return [_to_data(spec, paths, p, store) for p in range(len(seeds))]


# ------------------------------------------------------------------ G-computation


def _star_tables(spec: ScenarioSpec, g_star: DesignRule | None) -> NDArray:
    return (spec.g_star if g_star is None else g_star).probs


def _single_value(spec: ScenarioSpec, q: NDArray, g: NDArray, tau: int, engine: str, budget: float) -> float:
    spec = spec.with_tau(tau)
    if engine == "markov" or (engine == "auto" and spec.unit_local):
        return markov.target_value(spec, q, g)
    lat = Lattice(spec, g, tau, merge=engine != "tree", budget=budget)
    values = lat.backward(q, g, lat.unit_outcomes(spec.outcome))
    return float(values[0].mean())


def gcomp_exact(
    spec: ScenarioSpec,
    g_star: DesignRule | Target | None = None,
    tau: int | None = None,
    q: TransitionTable | NDArray | None = None,
    budget: float = DEFAULT_BUDGET,
    engine: str = "auto",
) -> GcompResult:
    """Exact mean outcome at ``tau`` under the target rule(s).

    ``engine`` picks the path tree (``"tree"``), the merged-window program
    (``"window"``), the unit-chain recursion (``"markov"``) or the cheapest
    applicable one (``"auto"``). Over-budget enumerations raise
    :class:`~nettmle.core.BudgetExceededError`.
    """
    tau = spec.tau if tau is None else tau
    target = spec.target() if g_star is None else as_target(g_star)
    qt = q_table(q, spec)
    value = sum(w * _single_value(spec, qt, g.probs, tau, engine, budget) for w, g in target)
    return GcompResult(float(value), 0.0, "exact", 0, horizon=tau)


def gcomp_mc(
    spec: ScenarioSpec,
    q: TransitionTable | NDArray | None = None,
    g_star: DesignRule | Target | None = None,
    tau: int | None = None,
    paths: int = 10_000,
    seed: int = 0,
) -> GcompResult:
    """Monte Carlo mean outcome at ``tau``; contrasts share the same uniforms."""
    if paths < 1:
        raise ValueError("paths must be at least 1")
    tau = spec.tau if tau is None else tau
    target = spec.target() if g_star is None else as_target(g_star)
    rng = np.random.default_rng(seed)
    U_A = rng.random((paths, tau, spec.n_units))
    U_L = rng.random((paths, tau, spec.n_units))
    qt = q_table(q, spec)
    y = np.zeros(paths)
    for w, g in target:
        sim = rollout(spec, qt, design_tables(g, tau), U_A, U_L)
        y += w * sim.outcome(spec)
    se = float(y.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0
    return GcompResult(float(y.mean()), se, "mc", paths, horizon=tau)


def gcomp_discounted(
    spec: ScenarioSpec,
    q: TransitionTable | NDArray | None = None,
    g_star: DesignRule | None = None,
    tau: int | None = None,
    gamma: float = 0.9,
    tol: float = 1e-8,
    budget: float = DEFAULT_BUDGET,
) -> GcompResult:
    """``sum_{t >= tau} gamma^(t - tau) Psi_t`` truncated after ``h`` terms.

    ``h`` is the least horizon with ``gamma^h / (1 - gamma) <= tol``, which
    bounds the dropped tail since every ``Psi_t`` lies in [0, 1].
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    tau = spec.tau if tau is None else tau
    h = max(1, math.ceil(math.log(tol * (1.0 - gamma)) / math.log(gamma)))
    while gamma**h / (1.0 - gamma) > tol:
        h += 1
    g = _star_tables(spec, g_star)
    qt = q_table(q, spec)
    curve = outcome_curve(spec, qt, g, tau + h - 1, budget)
    disc = gamma ** np.arange(h)
    value = float(disc @ curve[tau - 1 : tau - 1 + h])
    return GcompResult(value, 0.0, "exact", 0, truncation_bound=gamma**h / (1.0 - gamma), horizon=h)


def outcome_curve(
    spec: ScenarioSpec, q: NDArray, g: NDArray, horizon: int, budget: float = DEFAULT_BUDGET
) -> NDArray[np.float64]:
    """Exact mean outcome after each round 1..horizon under a fixed rule."""
    if spec.unit_local:
        return markov.target_value_at(spec, q, g, horizon)
    lat = Lattice(spec, g, horizon, merge=True, budget=budget, keep_states=True)
    w = lat.forward(q, g)
    out = np.zeros(horizon)
    for k, level in enumerate(lat.levels):
        if level.kind == "L" and level.i == spec.n_units - 1:
            if k + 1 == len(lat.levels):
                L = lat.final_L
            else:
                L = lat.states[k + 1][1]
            out[level.t] = float(w[k + 1] @ spec.outcome[L[:, lat.position(level.t), :]].mean(axis=1))
    return out


# ------------------------------------------------------------ conditional outcomes


def _require_m1(spec: ScenarioSpec) -> None:
    if spec.model_class == "M":
        raise UnsupportedError(
            "context-conditional outcomes need the sufficiency of the state context; "
            "use the ratio-weighted representation for this scenario"
        )


def conditional_outcome(
    spec: ScenarioSpec,
    node: tuple[int, int],
    context: int,
    state: int | None = None,
    q: TransitionTable | NDArray | None = None,
    g_star: DesignRule | None = None,
    unit: int | None = None,
    backend: str = "exact",
    paths: int = 10_000,
    seed: int = 0,
    budget: float = DEFAULT_BUDGET,
) -> float:
    """``E_{q,g*}[Y | L(s,j) = l, C(s,j) = c]`` (or given the context only).

    ``node`` is the 1-based ``(s, j)``; ``unit`` selects ``Y(k)`` (1-based)
    instead of the unit average.

    Raises:
        UnsupportedError: for scenarios tagged with the base model only.
        ValueError: when the context has probability zero under the target rule.
    """
    _require_m1(spec)
    s, j = node
    if not (1 <= s <= spec.tau and 1 <= j <= spec.n_units):
        raise IndexError(f"node {node} outside rounds 1..{spec.tau} and units 1..{spec.n_units}")
    qt = q_table(q, spec)
    g = _star_tables(spec, g_star)
    if backend == "exact":
        lat = Lattice(spec, g, spec.tau, merge=True, budget=budget)
        w = lat.forward(qt, g)
        vals = lat.backward(qt, g, lat.unit_outcomes(spec.outcome))
        num = lat.numerators(w, vals, s - 1, j - 1)  # (n_c, S, N)
        k = lat.level_index("L", s - 1, j - 1)
        mass = np.bincount(lat.levels[k].codes, w[k], minlength=spec.n_l_contexts)[context]
        if mass <= 0:
            raise ValueError(f"context {context} is unreachable at node {node}")
        per_l = num[context] / mass  # (S, N)
        per_l = per_l.mean(axis=1) if unit is None else per_l[:, unit - 1]
        return float(per_l[state]) if state is not None else float(qt[context] @ per_l)
    if backend != "mc":
        raise ValueError("backend must be 'exact' or 'mc'")
    rng = np.random.default_rng(seed)
    U_A = rng.random((paths, spec.tau, spec.n_units))
    U_L = rng.random((paths, spec.tau, spec.n_units))
    force = {(s - 1, j - 1): state} if state is not None else None
    sim = rollout(spec, qt, design_tables(g, spec.tau), U_A, U_L, force=force)
    hit = sim.l_codes[:, s - 1, j - 1] == context
    if not hit.any():
        raise ValueError(f"context {context} never reached at node {node} in {paths} paths")
    last = sim.states[:, -1, :]
    y = spec.outcome[last].mean(axis=1) if unit is None else spec.outcome[last[:, unit - 1]]
    return float(y[hit].mean())


# ----------------------------------------------------------------------- marginals


def context_marginals(
    spec: ScenarioSpec,
    design: DesignRule | NDArray,
    T: int,
    q: TransitionTable | NDArray | None = None,
    backend: str = "auto",
    kind: str = "L",
    theta: NDArray | None = None,
    paths: int = 10_000,
    seed: int = 0,
    budget: float = DEFAULT_BUDGET,
) -> ContextMarginals:
    """Per-node context laws over ``T`` rounds under a design or target rule.

    Backends: ``"markov"`` (independent unit chains), ``"exact"`` (merged
    window program), ``"mc"`` (frequencies over simulated paths), ``"auto"``.
    """
    qt = q_table(q, spec)
    tables = design_tables(design, T)
    if backend == "auto":
        backend = "markov" if spec.unit_local else "exact"
    n_codes = spec.n_l_contexts if kind == "L" else spec.n_a_contexts
    if backend == "markov":
        cm = markov.chain_marginals(spec, qt, tables, T, theta)
        table = cm.h_l if kind == "L" else cm.h_a
        h = cm.per_unit(table)
    elif backend == "exact":
        lat = Lattice(spec, tables, T, theta=theta, merge=True, budget=budget)
        h = lat.marginals(lat.forward(qt, tables), kind)
    elif backend == "mc":
        rng = np.random.default_rng(seed)
        U_A = rng.random((paths, T, spec.n_units))
        U_L = rng.random((paths, T, spec.n_units))
        sim = rollout(spec, qt, tables, U_A, U_L, theta=theta)
        codes = sim.l_codes if kind == "L" else sim.a_codes
        h = np.zeros((T, spec.n_units, n_codes))
        for t in range(T):
            for i in range(spec.n_units):
                h[t, i] = np.bincount(codes[:, t, i], minlength=n_codes) / paths
    else:
        raise ValueError(f"unknown backend {backend!r}")
    k = tail_window(T)
    return ContextMarginals(h, h.mean(axis=(0, 1)), h[T - k :].mean(axis=(0, 1)), kind, backend, paths if backend == "mc" else 0)
