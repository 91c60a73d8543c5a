"""Generative scenarios: transition table, summarizers, outcome map and target rule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import DesignRule, NetworkStructure, TransitionTable, UnsupportedError
from .summarizers import (
    ClusterA,
    ClusterL,
    ConstantSummarizer,
    HouseholdL,
    Summarizer,
    UnitMarkovA,
    UnitMarkovL,
)

SCHEMA_VERSION = 1
MODEL_CLASSES = ("M", "M1", "M2")

Target = tuple[tuple[float, DesignRule], ...]


def as_target(target: DesignRule | Sequence[tuple[float, DesignRule]]) -> Target:
    """Normalize a rule or a weighted list of rules into a target tuple."""
    if isinstance(target, DesignRule):
        return ((1.0, target),)
    return tuple((float(w), g) for w, g in target)


def contrast(g_first: DesignRule, g_second: DesignRule) -> Target:
    """Target ``Psi(g_second) - Psi(g_first)``."""
    return ((-1.0, g_first), (1.0, g_second))


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """A discrete generative model for an N-unit trial.

    ``builder`` and ``params`` record how the summarizers were constructed so
    that the spec can be rebuilt from JSON.
    """

    name: str
    model_class: str
    n_units: int
    n_arms: int
    n_states: int
    q0: TransitionTable
    l_summarizer: Summarizer
    a_summarizer: Summarizer
    network: NetworkStructure
    outcome: NDArray[np.float64]
    g_star: DesignRule
    tau: int
    initial_state: NDArray[np.int64]
    builder: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)
    arm_rules: Mapping[int, DesignRule] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.model_class not in MODEL_CLASSES:
            raise ValueError(f"model_class must be one of {MODEL_CLASSES}")
        out = np.array(self.outcome, dtype=np.float64)
        if out.shape != (self.n_states,) or out.min() < 0 or out.max() > 1:
            raise ValueError("outcome map must send every state into [0, 1]")
        out.setflags(write=False)
        object.__setattr__(self, "outcome", out)
        init = np.broadcast_to(np.asarray(self.initial_state, dtype=np.int64), (self.n_units,)).copy()
        init.setflags(write=False)
        object.__setattr__(self, "initial_state", init)
        if self.q0.n_contexts != self.l_summarizer.n_codes or self.q0.n_states != self.n_states:
            raise ValueError("q0 shape does not match the state-context set")
        if self.g_star.n_contexts != self.a_summarizer.n_codes or self.g_star.n_arms != self.n_arms:
            raise ValueError("g_star shape does not match the arm-context set")
        if self.tau < 1:
            raise ValueError("tau must be at least 1")

    @property
    def memory(self) -> int:
        return max(self.l_summarizer.memory, self.a_summarizer.memory)

    @property
    def n_l_contexts(self) -> int:
        return self.l_summarizer.n_codes

    @property
    def n_a_contexts(self) -> int:
        return self.a_summarizer.n_codes

    @property
    def unit_local(self) -> bool:
        return isinstance(self.l_summarizer, UnitMarkovL) and self.a_summarizer.unit_local

    def target(self) -> Target:
        return as_target(self.g_star)

    def with_q0(self, q0: TransitionTable | NDArray) -> "ScenarioSpec":
        q0 = q0 if isinstance(q0, TransitionTable) else TransitionTable(q0)
        return replace(self, q0=q0)

    def with_g_star(self, g_star: DesignRule) -> "ScenarioSpec":
        return replace(self, g_star=g_star)

    def with_tau(self, tau: int) -> "ScenarioSpec":
        return replace(self, tau=tau)

    def with_units(self, n_units: int) -> "ScenarioSpec":
        """Same scenario on a different number of units (unit-local scenarios only)."""
        if n_units == self.n_units:
            return self
        if not self.unit_local:
            raise UnsupportedError("only unit-local scenarios can be resized")
        init = np.resize(self.initial_state, n_units)
        net = NetworkStructure(n_units, memory=self.network.memory)
        params = {**self.params, "n_units": n_units}
        return replace(self, n_units=n_units, initial_state=init, network=net, params=params)

    def summarize(self, A: NDArray, L: NDArray, tt: int, i: int, kind: str, theta: Any = 0) -> NDArray[np.int64]:
        summ = self.l_summarizer if kind == "L" else self.a_summarizer
        return summ.codes(A, L, tt, i, theta)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SCHEMA_VERSION,
            "name": self.name,
            "builder": self.builder,
            "params": dict(self.params),
            "model_class": self.model_class,
            "supports": {"n_units": self.n_units, "n_arms": self.n_arms, "n_states": self.n_states},
            "tau": self.tau,
            "initial_state": self.initial_state.tolist(),
            "outcome": self.outcome.tolist(),
            "q0": self.q0.to_dict(),
            "g_star": self.g_star.to_dict(),
            "arm_rules": {str(k): g.to_dict() for k, g in self.arm_rules.items()},
            "summarizers": {"L": self.l_summarizer.descriptor(), "A": self.a_summarizer.descriptor()},
            "network": self.network.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ScenarioSpec":
        if payload.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema version {payload.get('version')!r}")
        builder = payload["builder"]
        if builder not in BUILDERS:
            raise ValueError(f"unknown scenario builder {builder!r}")
        spec = BUILDERS[builder](**payload["params"])
        if isinstance(spec, tuple):
            spec = spec[0]
        arm_rules = {int(k): DesignRule.from_dict(v) for k, v in payload.get("arm_rules", {}).items()}
        return replace(
            spec,
            name=payload["name"],
            model_class=payload["model_class"],
            q0=TransitionTable.from_dict(payload["q0"]),
            g_star=DesignRule.from_dict(payload["g_star"]),
            outcome=np.asarray(payload["outcome"], dtype=np.float64),
            tau=int(payload["tau"]),
            initial_state=np.asarray(payload["initial_state"], dtype=np.int64),
            arm_rules=arm_rules or spec.arm_rules,
        )


def _dirichlet_rows(rng: np.random.Generator, n_rows: int, n_states: int, conc: float = 1.0) -> NDArray:
    rows = rng.dirichlet(np.full(n_states, conc), size=n_rows)
    return rows / rows.sum(axis=1, keepdims=True)


def _check_counts(**counts: int) -> None:
    for key, value in counts.items():
        if int(value) < 1:
            raise ValueError(f"{key} must be at least 1, got {value}")


def default_outcome(n_states: int) -> NDArray[np.float64]:
    return np.linspace(0.0, 1.0, n_states) if n_states > 1 else np.zeros(1)


def make_best_arm(
    n_arms: int = 2,
    n_states: int = 2,
    n_units: int = 1,
    tau: int = 1,
    n_theta: int = 1,
    seed: int = 0,
    rows: ArrayLike | None = None,
    outcome: ArrayLike | None = None,
    initial_state: int | Sequence[int] = 0,
    concentration: float = 1.0,
) -> tuple[ScenarioSpec, dict[int, DesignRule]]:
    """Independent per-unit MDPs, ``q0(l | a, l_prev)``, targets "always arm a".

    ``rows`` may fix the kernel as an array (n_arms, n_states, n_states) with
    ``rows[a, l_prev, l]``; otherwise it is drawn from a Dirichlet with ``seed``.
    Returns the spec (target: arm 0) and the per-arm static rules.
    """
    _check_counts(n_arms=n_arms, n_states=n_states, n_units=n_units, tau=tau, n_theta=n_theta)
    if n_arms < 2:
        raise ValueError("best-arm scenarios need at least two arms")
    if rows is None:
        rng = np.random.default_rng(seed)
        kernel = _dirichlet_rows(rng, n_arms * n_states, n_states, concentration).reshape(n_arms, n_states, n_states)
        rows_param = None
    else:
        kernel = np.asarray(rows, dtype=np.float64)
        if kernel.shape != (n_arms, n_states, n_states):
            raise ValueError("rows must have shape (n_arms, n_states, n_states)")
        rows_param = kernel.tolist()
    l_summ = UnitMarkovL(n_arms, n_states, n_theta)
    a_summ = UnitMarkovA(n_states, n_theta)
    # context code = a * (n_theta * S) + theta * S + l_prev; rows repeat over theta
    table = np.repeat(kernel[:, None, :, :], n_theta, axis=1).reshape(-1, n_states)
    arm_rules = {a: DesignRule.static_arm(a_summ.n_codes, n_arms, a) for a in range(n_arms)}
    out = default_outcome(n_states) if outcome is None else np.asarray(outcome, dtype=np.float64)
    params = {
        "n_arms": n_arms,
        "n_states": n_states,
        "n_units": n_units,
        "tau": tau,
        "n_theta": n_theta,
        "seed": seed,
        "rows": rows_param,
        "outcome": None if outcome is None else out.tolist(),
        "initial_state": initial_state if isinstance(initial_state, int) else list(initial_state),
        "concentration": concentration,
    }
    spec = ScenarioSpec(
        name=f"best-arm-K{n_arms}-S{n_states}",
        model_class="M2",
        n_units=n_units,
        n_arms=n_arms,
        n_states=n_states,
        q0=TransitionTable(table),
        l_summarizer=l_summ,
        a_summarizer=a_summ,
        network=NetworkStructure(n_units, memory=1),
        outcome=out,
        g_star=arm_rules[0],
        tau=tau,
        initial_state=np.broadcast_to(np.asarray(initial_state), (n_units,)),
        builder="best-arm",
        params=params,
        arm_rules=arm_rules,
    )
    return spec, arm_rules


def make_cluster_mdp(
    n_clusters: int = 2,
    cluster_size: int = 2,
    n_arms: int = 2,
    n_states: int = 2,
    dependence: float = 0.5,
    tau: int = 2,
    seed: int = 0,
    g_scope: str = "cluster",
    cluster_bound: int | None = None,
    initial_state: int | Sequence[int] = 0,
) -> ScenarioSpec:
    """Disjoint clusters, each a joint MDP over its members.

    Rows are ``(1 - dependence) * own[a_i, l_i(t-1)] + dependence * noise[c]``,
    so ``dependence=0`` makes every row ignore the other members. The target
    rule plays arm ``(sum of the cluster's previous states) mod n_arms``; with
    ``g_scope="global"`` it reads the population count of nonzero states
    instead, which couples clusters and leaves only the base model.
    """
    _check_counts(n_clusters=n_clusters, cluster_size=cluster_size, n_arms=n_arms, n_states=n_states, tau=tau)
    if not 0.0 <= dependence <= 1.0:
        raise ValueError("dependence must lie in [0, 1]")
    bound = cluster_size if cluster_bound is None else cluster_bound
    if cluster_size > bound:
        raise ValueError("cluster_size exceeds the declared cluster bound")
    n_units = n_clusters * cluster_size
    clusters = tuple(tuple(range(k * cluster_size, (k + 1) * cluster_size)) for k in range(n_clusters))
    l_summ = ClusterL(clusters, n_units, n_arms, n_states)
    a_summ = ClusterA(clusters, n_units, n_states, g_scope)
    rng = np.random.default_rng(seed)
    own = _dirichlet_rows(rng, n_arms * n_states, n_states).reshape(n_arms, n_states, n_states)
    noise = _dirichlet_rows(rng, l_summ.n_codes, n_states)
    fields = l_summ.decode(np.arange(l_summ.n_codes))
    m = cluster_size - 1
    a_self = fields[:, m]
    l_self = fields[:, m + cluster_size]
    table = (1.0 - dependence) * own[a_self, l_self] + dependence * noise
    table /= table.sum(axis=1, keepdims=True)
    a_fields = a_summ.decode(np.arange(a_summ.n_codes))
    if g_scope == "cluster":
        star_arm = a_fields.sum(axis=1) % n_arms
    else:
        star_arm = (a_fields[:, 0] * 2 >= n_units).astype(np.int64) % n_arms
    g_rows = np.zeros((a_summ.n_codes, n_arms))
    g_rows[np.arange(a_summ.n_codes), star_arm] = 1.0
    params = {
        "n_clusters": n_clusters,
        "cluster_size": cluster_size,
        "n_arms": n_arms,
        "n_states": n_states,
        "dependence": dependence,
        "tau": tau,
        "seed": seed,
        "g_scope": g_scope,
        "cluster_bound": cluster_bound,
        "initial_state": initial_state if isinstance(initial_state, int) else list(initial_state),
    }
    return ScenarioSpec(
        name=f"cluster-mdp-{n_clusters}x{cluster_size}",
        model_class="M1" if g_scope == "cluster" else "M",
        n_units=n_units,
        n_arms=n_arms,
        n_states=n_states,
        q0=TransitionTable(table),
        l_summarizer=l_summ,
        a_summarizer=a_summ,
        network=NetworkStructure(n_units, clusters=clusters, memory=1, cluster_bound=bound),
        outcome=default_outcome(n_states),
        g_star=DesignRule.fixed(g_rows),
        tau=tau,
        initial_state=np.broadcast_to(np.asarray(initial_state), (n_units,)),
        builder="cluster-mdp",
        params=params,
    )


def make_household_censoring(
    households: Sequence[Sequence[int]] = ((0, 1), (2, 3)),
    contacts: Sequence[Sequence[int]] | None = None,
    memory: int = 1,
    n_states: int = 2,
    tau: int = 2,
    seed: int = 0,
    slots: int | None = None,
    base_logit: float = -1.0,
    self_weight: float = 1.5,
    contact_weight: float = 1.0,
    initial_state: int | Sequence[int] = 0,
) -> ScenarioSpec:
    """Households with outside contacts that only count when the unit may leave.

    Arm 1 lets a unit meet its contact set, arm 0 keeps it home; the target
    rule plays arm 0 everywhere. States are infection levels and the next
    level is drawn from a softmax whose slope grows with the unit's own level
    and the visible levels of its contacts.
    """
    units = sorted(u for h in households for u in h)
    if len(units) != len(set(units)):
        raise ValueError("households overlap")
    n_units = len(units)
    if units != list(range(n_units)):
        raise ValueError("households must cover units 0..N-1")
    if contacts is None:
        contacts = [()] * n_units
    if len(contacts) != n_units:
        raise ValueError("one contact list per unit is required")
    _check_counts(n_states=n_states, tau=tau, memory=memory)
    l_summ = HouseholdL(households, contacts, n_units, n_states, memory, slots)
    a_summ = ConstantSummarizer("A")
    rng = np.random.default_rng(seed)
    jitter = rng.normal(scale=0.1, size=n_states)
    fields = l_summ.decode(np.arange(l_summ.n_codes))
    m, t0 = l_summ.slots - 1, memory
    same = fields[:, :m]
    pos = m + (t0 + 1) + m * (t0 + 1)
    own_prev = fields[:, pos + t0 - 1]
    others_prev = fields[:, pos + t0 + m * (t0 - 1) : pos + t0 + m * t0]
    # same-round code S + 1 means "not yet drawn"; 0 means censored
    same_level = np.where((same >= 1) & (same <= n_states), same - 1, 0)
    prev_level = np.where(others_prev >= 1, others_prev - 1, 0)
    pressure = same_level.sum(axis=1) + prev_level.sum(axis=1)
    drive = base_logit + self_weight * own_prev + contact_weight * pressure
    levels = np.arange(n_states)
    logits = drive[:, None] * levels[None, :] / max(n_states - 1, 1) + jitter[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    table = np.exp(logits)
    table /= table.sum(axis=1, keepdims=True)
    params = {
        "households": [list(h) for h in households],
        "contacts": [list(c) for c in contacts],
        "memory": memory,
        "n_states": n_states,
        "tau": tau,
        "seed": seed,
        "slots": slots,
        "base_logit": base_logit,
        "self_weight": self_weight,
        "contact_weight": contact_weight,
        "initial_state": initial_state if isinstance(initial_state, int) else list(initial_state),
    }
    friends = tuple(tuple(v for v in f if v >= 0) for f in l_summ.friends)
    return ScenarioSpec(
        name=f"household-censoring-N{n_units}",
        model_class="M1",
        n_units=n_units,
        n_arms=2,
        n_states=n_states,
        q0=TransitionTable(table),
        l_summarizer=l_summ,
        a_summarizer=a_summ,
        network=NetworkStructure(
            n_units,
            clusters=tuple(tuple(sorted(h)) for h in households),
            friends_l=friends,
            memory=memory,
            cluster_bound=max(len(h) for h in households),
        ),
        outcome=default_outcome(n_states),
        g_star=DesignRule.static_arm(1, 2, 0),
        tau=tau,
        initial_state=np.broadcast_to(np.asarray(initial_state), (n_units,)),
        builder="household-censoring",
        params=params,
    )


BUILDERS = {
    "best-arm": make_best_arm,
    "cluster-mdp": make_cluster_mdp,
    "household-censoring": make_household_censoring,
}


def build_scenario(builder: str, **params: Any) -> ScenarioSpec:
    """Dispatch to a named constructor; best-arm returns only the spec."""
    if builder not in BUILDERS:
        raise ValueError(f"unknown scenario builder {builder!r}; choose from {sorted(BUILDERS)}")
    spec = BUILDERS[builder](**params)
    return spec[0] if isinstance(spec, tuple) else spec
