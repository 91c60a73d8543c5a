"""Candidate designs, the plug-in variance criterion and along-the-trial selection."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

from .core import DesignRule, TrialData, UnsupportedError
from .eif import eif_table
from .lattice import DEFAULT_BUDGET
from .nuisance import fit_tabular_mle
from .scenarios import ScenarioSpec, Target, as_target, contrast
from .simulation import gcomp_exact

EPS_FLOOR = 0.05
UCB_C = 2.0


def apply_floor(probs: NDArray, floor: float = EPS_FLOOR) -> NDArray[np.float64]:
    """Mix towards uniform just enough that every arm gets at least ``floor``.

    Rows already at or above the floor are left unchanged.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    K = p.shape[1]
    if floor * K > 1:
        raise ValueError(f"floor {floor} is infeasible for {K} arms")
    low = p.min(axis=1) < floor
    p = p.copy()
    p[low] = floor + (1.0 - K * floor) * p[low]
    return p


@dataclass(frozen=True)
class DesignState:
    """Per-arm estimates and standard errors seen by the design, plus the rule in force."""

    psi: NDArray[np.float64]
    sd: NDArray[np.float64]
    counts: NDArray[np.int64]
    rule: DesignRule | None = None

    @property
    def n_arms(self) -> int:
        return len(self.psi)

    def snapshot(self) -> dict[str, Any]:
        return {"psi": self.psi.tolist(), "sd": self.sd.tolist(), "counts": self.counts.tolist()}


def _argmax_low(values: NDArray) -> int:
    return int(np.flatnonzero(values == values.max())[0])


def design_assign(
    state: DesignState,
    family: str,
    epsilon: float = 0.1,
    ucb_c: float = UCB_C,
    sigma: NDArray | None = None,
    floor: float = EPS_FLOOR,
) -> NDArray[np.float64]:
    """Arm distribution of one design family at the current state.

    ``sigma`` gives per-arm outcome standard deviations for ``neyman``.
    """
    K = state.n_arms
    if K < 1:
        raise ValueError("empty arm set")
    if family == "uniform":
        return np.full(K, 1.0 / K)
    if family == "epsilon-greedy":
        p = np.full(K, epsilon / K)
        p[_argmax_low(state.psi)] += 1.0 - epsilon
    elif family == "ucb":
        p = np.zeros(K)
        p[_argmax_low(state.psi + ucb_c * state.sd)] = 1.0
    elif family == "neyman":
        if sigma is None:
            raise ValueError("neyman needs per-arm standard deviations")
        if K != 2:
            raise UnsupportedError("Neyman allocation is defined for two arms")
        sigma = np.asarray(sigma, dtype=np.float64)
        p = sigma / sigma.sum() if sigma.sum() > 0 else np.full(K, 0.5)
    else:
        raise ValueError(f"design family {family!r} has no assignment rule")
    return apply_floor(p, floor)[0]


def outcome_sd(spec: ScenarioSpec, q: NDArray) -> NDArray[np.float64]:
    """(n_a, K) sd of the next outcome ``f(L)`` given arm and arm context under q."""
    if not hasattr(spec.l_summarizer, "compose"):
        raise UnsupportedError("state contexts do not split into (arm, arm context)")
    K, n_a = spec.n_arms, spec.n_a_contexts
    codes = spec.l_summarizer.compose(np.arange(K)[None, :], np.arange(n_a)[:, None])  # (n_a, K)
    rows = np.asarray(q)[codes]  # (n_a, K, S)
    f = spec.outcome
    mean = rows @ f
    return np.sqrt(np.clip(rows @ (f * f) - mean**2, 0.0, None))


def neyman_from_q(spec: ScenarioSpec, q: NDArray, floor: float = EPS_FLOOR) -> DesignRule:
    """Two-arm rule ``g(a | c) = sd(a, c) / (sd(1, c) + sd(2, c))``, floored."""
    if spec.n_arms != 2:
        raise UnsupportedError("Neyman allocation is defined for two arms")
    sd = outcome_sd(spec, q)
    tot = sd.sum(axis=1, keepdims=True)
    p = np.divide(sd, tot, out=np.full_like(sd, 0.5), where=tot > 0)
    return DesignRule("neyman", apply_floor(p, floor), {"sd": sd.tolist(), "floor": floor})


def chi_variance(
    spec: ScenarioSpec,
    q: NDArray,
    design: DesignRule,
    target: DesignRule | Target | None = None,
    horizon: int = 200,
    budget: float = DEFAULT_BUDGET,
    backend: str = "auto",
) -> float:
    """Limit variance of the gradient of the target (default: the spec's) under ``design``.

    Uses the tail context law of a ``horizon``-round trial under (q, design).
    """
    target = spec.target() if target is None else as_target(target)
    table = eif_table(spec, q, design, horizon, rep=2, backend=backend, target=target, budget=budget)
    return table.variance_inf


def select_design(chis: Sequence[float]) -> int:
    """Index of the smallest criterion; ties go to the lowest index."""
    chis = np.asarray(chis, dtype=np.float64)
    if chis.size < 1:
        raise ValueError("no candidates")
    return int(np.flatnonzero(chis == chis.min())[0])


# ------------------------------------------------------------------- trial hooks


@dataclass
class DesignTrace:
    rows: list[dict[str, Any]] = field(default_factory=list)

    def add(self, t: int, family: str, theta: dict[str, Any], selected: int) -> None:
        self.rows.append({"t": t, "family": family, "theta": theta, "selected": selected})

    def to_csv(self, path: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "family", "theta", "selected"])
        for r in self.rows:
            w.writerow([r["t"], r["family"], json.dumps(r["theta"], sort_keys=True), r["selected"]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def round_trace(trace: DesignTrace, n_rounds: int, initial: DesignRule, initial_index: int = -1) -> DesignTrace:
    """Expand an update-round trace to one row per round (the rule in force at each round)."""
    updates = {r["t"]: r for r in trace.rows}
    cur = {"family": initial.family, "theta": dict(initial.theta), "selected": initial_index}
    out = DesignTrace()
    for t in range(1, n_rounds + 1):
        if t in updates:
            cur = updates[t]
        out.add(t, cur["family"], cur["theta"], cur["selected"])
    return out


class SelectionHook:
    """Re-selects among fixed candidate designs at update rounds by the smallest criterion.

    At each update round the kernel is refit on the rounds seen so far and
    every candidate's criterion recomputed; other rounds keep the rule in force.
    """

    def __init__(
        self,
        spec: ScenarioSpec,
        candidates: Sequence[DesignRule],
        update_rounds: Sequence[int],
        target: DesignRule | Target | None = None,
        horizon: int = 200,
        shrinkage: float = 0.5,
    ):
        self.spec = spec
        self.candidates = list(candidates)
        self.update_rounds = set(int(t) for t in update_rounds)
        self.target = target
        self.horizon = horizon
        self.shrinkage = shrinkage
        self.trace = DesignTrace()
        self.selected: list[tuple[int, int]] = []

    def __call__(self, t: int, data: TrialData, rule: DesignRule) -> DesignRule | None:
        if t not in self.update_rounds:
            return None
        q = fit_tabular_mle(self.spec, data, self.shrinkage).probs
        chis = [chi_variance(self.spec, q, g, self.target, self.horizon) for g in self.candidates]
        k = select_design(chis)
        self.selected.append((t, k))
        self.trace.add(t, self.candidates[k].family, {"chi": [float(c) for c in chis]}, k)
        return self.candidates[k]


class BanditHook:
    """epsilon-greedy / UCB / Neyman updates from per-arm plug-in estimates.

    ``psi[a]`` is the plug-in value of "always arm a" under the refit kernel
    and ``sd[a]`` its standard error from the gradient's limit variance.
    """

    def __init__(
        self,
        spec: ScenarioSpec,
        family: str,
        update_rounds: Sequence[int],
        epsilon: float = 0.1,
        ucb_c: float = UCB_C,
        floor: float = EPS_FLOOR,
        shrinkage: float = 0.5,
    ):
        if not spec.arm_rules:
            raise UnsupportedError("bandit designs need per-arm target rules")
        self.spec = spec
        self.family = family
        self.update_rounds = set(int(t) for t in update_rounds)
        self.epsilon = epsilon
        self.ucb_c = ucb_c
        self.floor = floor
        self.shrinkage = shrinkage
        self.trace = DesignTrace()

    def state(self, data: TrialData) -> DesignState:
        spec = self.spec
        q = fit_tabular_mle(spec, data, self.shrinkage).probs
        K = spec.n_arms
        sched = data.design_schedule
        psi = np.array([gcomp_exact(spec, spec.arm_rules[a], q=q).value for a in range(K)])
        sd = np.zeros(K)
        n = data.n_rounds * data.n_units
        for a in range(K):
            var = eif_table(spec, q, sched, data.n_rounds, rep=2, target=spec.arm_rules[a]).variance
            sd[a] = np.sqrt(var / n)
        counts = np.bincount(np.asarray(data.actions).ravel(), minlength=K)
        return DesignState(psi, sd, counts)

    def __call__(self, t: int, data: TrialData, rule: DesignRule) -> DesignRule | None:
        if t not in self.update_rounds:
            return None
        spec = self.spec
        st = self.state(data)
        if self.family == "neyman":
            q = fit_tabular_mle(spec, data, self.shrinkage).probs
            new = neyman_from_q(spec, q, self.floor)
        else:
            p = design_assign(st, self.family, self.epsilon, self.ucb_c, floor=self.floor)
            new = DesignRule(self.family, np.tile(p, (spec.n_a_contexts, 1)), st.snapshot())
        self.trace.add(t, self.family, st.snapshot(), -1)
        return new


def best_arm_contrast(spec: ScenarioSpec, first: int = 0, second: int = 1) -> Target:
    """Target ``Psi(always arm second) - Psi(always arm first)``."""
    return contrast(spec.arm_rules[first], spec.arm_rules[second])
