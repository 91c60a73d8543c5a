"""Model-class audits by exhaustive enumeration of the path tree under the target rule."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .lattice import DEFAULT_BUDGET, Lattice, estimate_leaves
from .scenarios import ScenarioSpec

AUDIT_TOL = 1e-10


@dataclass
class AuditReport:
    scenario: str
    model_class: str
    checked: bool
    sufficiency_gap: float = float("nan")
    independence_gap: float = float("nan")
    decomposition_ok: bool | None = None
    leaves: float = 0.0
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        if not self.checked:
            return True
        ok = self.sufficiency_gap <= AUDIT_TOL
        if self.model_class == "M2":
            ok = ok and self.independence_gap <= AUDIT_TOL and bool(self.decomposition_ok)
        return ok

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "model_class": self.model_class,
            "checked": self.checked,
            "passed": self.passed,
            "sufficiency_gap": self.sufficiency_gap,
            "independence_gap": self.independence_gap,
            "decomposition_ok": self.decomposition_ok,
            "leaves": self.leaves,
            "warnings": self.warnings,
        }


def sufficiency_gap(spec: ScenarioSpec, lat: Lattice, weights: list[NDArray], values: list[NDArray]) -> float:
    """Largest gap between the full-past gain of ``L(s,j) = l`` on each ``Y(k)`` and its context version.

    The gain is ``E[Y(k) | l, past] - E[Y(k) | past]``; the context version
    replaces the full past by ``C_L(s,j)``. Only reachable (past, l) pairs count.
    """
    q = spec.q0.probs
    gap = 0.0
    for k in lat.state_levels():
        lv = lat.levels[k]
        w = weights[k]
        child = values[k + 1][lv.children]  # (P, S, N)
        num = np.zeros((spec.n_l_contexts, spec.n_states, spec.n_units))
        den = np.zeros(spec.n_l_contexts)
        np.add.at(num, lv.codes, w[:, None, None] * child)
        np.add.at(den, lv.codes, w)
        ctx = (num / np.where(den > 0, den, 1.0)[:, None, None])[lv.codes]
        rows = q[lv.codes][:, :, None]
        full_gain = child - (rows * child).sum(axis=1, keepdims=True)
        ctx_gain = ctx - (rows * ctx).sum(axis=1, keepdims=True)
        reach = (rows[:, :, 0] > 0) & (w > 0)[:, None]
        if reach.any():
            gap = max(gap, float(np.abs(full_gain - ctx_gain)[reach].max()))
    return gap


def _unit_paths(lat: Lattice, i: int) -> NDArray[np.int64]:
    """Integer id of unit ``i``'s own trajectory at every leaf."""
    p = lat.pad
    own = np.concatenate([lat.final_A[:, p:, i], lat.final_L[:, p:, i]], axis=1).astype(np.int64)
    _, ids = np.unique(own, axis=0, return_inverse=True)
    return ids.ravel()


def independence_gap(lat: Lattice, leaf_weights: NDArray) -> float:
    """Max over unit pairs of the total variation between the joint trajectory law and the product of marginals."""
    n = lat.spec.n_units
    ids = [_unit_paths(lat, i) for i in range(n)]
    gap = 0.0
    for i, j in itertools.combinations(range(n), 2):
        ni, nj = ids[i].max() + 1, ids[j].max() + 1
        joint = np.zeros((ni, nj))
        np.add.at(joint, (ids[i], ids[j]), leaf_weights)
        prod = np.outer(joint.sum(axis=1), joint.sum(axis=0))
        gap = max(gap, 0.5 * float(np.abs(joint - prod).sum()))
    return gap


def decomposition_holds(spec: ScenarioSpec, lat: Lattice) -> bool:
    """Every arm and state context of unit i is a function of unit i's own history."""
    for k, lv in enumerate(lat.levels):
        if lv.kind not in ("A", "L"):
            continue
        A, L = lat.states[k]
        own = np.concatenate([A[:, :, lv.i], L[:, :, lv.i]], axis=1).astype(np.int64)
        _, ids = np.unique(own, axis=0, return_inverse=True)
        ids = ids.ravel()
        lo = np.full(ids.max() + 1, np.iinfo(np.int64).max)
        hi = np.full(ids.max() + 1, np.iinfo(np.int64).min)
        np.minimum.at(lo, ids, lv.codes)
        np.maximum.at(hi, ids, lv.codes)
        if np.any(lo != hi):
            return False
    return True


def audit_scenario(spec: ScenarioSpec, budget: float = DEFAULT_BUDGET, horizon: int | None = None) -> AuditReport:
    """Check the model-class conditions of ``spec`` on the full path tree.

    Over-budget instances are skipped and the report carries a warning.
    """
    horizon = spec.tau if horizon is None else horizon
    spec = spec.with_tau(horizon)
    g = spec.g_star.probs
    leaves = estimate_leaves(spec, horizon, g > 0)
    report = AuditReport(spec.name, spec.model_class, False, leaves=leaves)
    if spec.model_class == "M":
        report.warnings.append("model class M carries no sufficiency condition")
        return report
    if leaves > budget:
        report.warnings.append(f"audit skipped: {leaves:.3g} paths exceed the enumeration budget {budget:.3g}")
        return report
    lat = Lattice(spec, g, horizon, merge=False, budget=budget, keep_states=spec.model_class == "M2")
    q = spec.q0.probs
    weights = lat.forward(q, g)
    values = lat.backward(q, g, lat.unit_outcomes(spec.outcome))
    report.checked = True
    report.sufficiency_gap = sufficiency_gap(spec, lat, weights, values)
    if spec.model_class == "M2":
        report.independence_gap = independence_gap(lat, weights[-1])
        report.decomposition_ok = decomposition_holds(spec, lat)
    return report
