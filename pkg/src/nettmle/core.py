"""Trial data model: node ordering, history slices, transition and design tables.

Arms and states are 0-based integer codes. Rounds ``t`` and units ``i`` are
1-based wherever they appear in a public signature (``NodeId``, CSV files).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

PROB_TOL = 1e-12


class ModelMismatchError(ValueError):
    """A context code or value falls outside the tables it is meant to index."""


class BudgetExceededError(RuntimeError):
    """Exact enumeration would exceed the configured path budget."""


class UnsupportedError(ValueError):
    """The requested operation is not defined for this scenario or estimator."""


class PositivityError(ValueError):
    """A density ratio would divide by a zero assignment probability."""


def validate_rows(probs: ArrayLike, name: str) -> NDArray[np.float64]:
    """Check that every row is a probability vector and return a read-only copy.

    Raises:
        ValueError: on negative entries or a row sum off by more than 1e-12.
    """
    arr = np.array(probs, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(arr < 0):
        row = int(np.argwhere(arr < 0)[0, 0])
        raise ValueError(f"{name} row {row} has negative entries")
    gaps = np.abs(arr.sum(axis=1) - 1.0)
    if np.any(gaps > PROB_TOL):
        row = int(np.argmax(gaps))
        raise ValueError(f"{name} row {row} sums to {arr[row].sum()!r}, not 1 within {PROB_TOL}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, order=True)
class NodeId:
    """Position of a node: round ``t`` in 1..T and unit ``i`` in 1..N."""

    t: int
    i: int


def column_index(node: NodeId, n_units: int, n_rounds: int | None = None) -> int:
    """Linear index ``k = (t-1)*N + i`` of a node in column order.

    Raises:
        IndexError: if the node lies outside the trial.
    """
    if n_units < 1:
        raise IndexError("n_units must be positive")
    if not 1 <= node.i <= n_units or node.t < 1 or (n_rounds is not None and node.t > n_rounds):
        raise IndexError(f"node {node} outside a trial with N={n_units}, T={n_rounds}")
    return (node.t - 1) * n_units + node.i


def node_from_index(k: int, n_units: int, n_rounds: int | None = None) -> NodeId:
    """Inverse of :func:`column_index`."""
    if n_units < 1 or k < 1 or (n_rounds is not None and k > n_rounds * n_units):
        raise IndexError(f"index {k} outside a trial with N={n_units}, T={n_rounds}")
    t, r = divmod(k - 1, n_units)
    return NodeId(t + 1, r + 1)


def _frozen_int(values: ArrayLike, shape: tuple[int, ...] | None = None) -> NDArray[np.int64]:
    arr = np.array(values, dtype=np.int64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrialData:
    """Observed treatments and measurements of a trial, rows are rounds.

    Attributes:
        actions: (T, N) arm codes.
        states: (T, N) state codes.
        n_arms: size of the arm set.
        n_states: size of the state set.
        initial_state: (N,) states used to pad histories before round 1.
        theta: (T,) design-summary code per round (0 when unused).
        design_schedule: optional (T, n_a_contexts, n_arms) assignment tables
            actually used at each round.
    """

    actions: NDArray[np.int64]
    states: NDArray[np.int64]
    n_arms: int
    n_states: int
    initial_state: NDArray[np.int64]
    theta: NDArray[np.int64] | None = None
    design_schedule: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        a = _frozen_int(self.actions)
        s = _frozen_int(self.states)
        if a.ndim != 2 or a.shape != s.shape:
            raise ValueError("actions and states must be (T, N) arrays of equal shape")
        if a.size and (a.min() < 0 or a.max() >= self.n_arms):
            raise ValueError("action code outside the arm set")
        if s.size and (s.min() < 0 or s.max() >= self.n_states):
            raise ValueError("state code outside the state set")
        init = _frozen_int(self.initial_state, (a.shape[1],))
        if init.min(initial=0) < 0 or init.max(initial=0) >= self.n_states:
            raise ValueError("initial state outside the state set")
        theta = np.zeros(a.shape[0], dtype=np.int64) if self.theta is None else self.theta
        theta = _frozen_int(theta, (a.shape[0],))
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "initial_state", init)
        object.__setattr__(self, "theta", theta)
        if self.design_schedule is not None:
            sched = np.array(self.design_schedule, dtype=np.float64)
            if sched.ndim != 3 or sched.shape[0] != a.shape[0] or sched.shape[2] != self.n_arms:
                raise ValueError("design_schedule must have shape (T, n_contexts, n_arms)")
            for t in range(sched.shape[0]):
                validate_rows(sched[t], f"design_schedule[{t}]")
            sched.setflags(write=False)
            object.__setattr__(self, "design_schedule", sched)

    @property
    def n_rounds(self) -> int:
        return int(self.actions.shape[0])

    @property
    def n_units(self) -> int:
        return int(self.actions.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrialData):
            return NotImplemented
        return (
            self.n_arms == other.n_arms
            and self.n_states == other.n_states
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.initial_state, other.initial_state)
        )

    def truncate(self, n_rounds: int) -> "TrialData":
        """Data observed through round ``n_rounds``."""
        if not 1 <= n_rounds <= self.n_rounds:
            raise ValueError(f"cannot truncate {self.n_rounds} rounds to {n_rounds}")
        sched = None if self.design_schedule is None else self.design_schedule[:n_rounds]
        return TrialData(
            self.actions[:n_rounds],
            self.states[:n_rounds],
            self.n_arms,
            self.n_states,
            self.initial_state,
            self.theta[:n_rounds],
            sched,
        )

    def padded(self, pad: int) -> tuple[NDArray[np.int8], NDArray[np.int8]]:
        """(1, pad + T, N) arrays with ``pad`` leading rows of arm 0 / initial state."""
        return pad_history(self.actions[None], self.states[None], self.initial_state, pad)

    def to_csv(self, path: str | Path | None = None) -> str:
        """Serialize as ``t,i,a,l`` rows in column order; returns the text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "i", "a", "l"])
        for t in range(self.n_rounds):
            for i in range(self.n_units):
                writer.writerow([t + 1, i + 1, int(self.actions[t, i]), int(self.states[t, i])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(
        cls,
        source: str | Path,
        n_arms: int,
        n_states: int,
        initial_state: ArrayLike | None = None,
    ) -> "TrialData":
        """Parse a ``t,i,a,l`` CSV (path or text) written by :meth:`to_csv`."""
        text = Path(source).read_text() if _looks_like_path(source) else str(source)
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty trial CSV")
        T = max(int(r["t"]) for r in rows)
        N = max(int(r["i"]) for r in rows)
        if len(rows) != T * N:
            raise ValueError(f"expected {T * N} rows for T={T}, N={N}, got {len(rows)}")
        acts = np.full((T, N), -1, dtype=np.int64)
        sts = np.full((T, N), -1, dtype=np.int64)
        for r in rows:
            t, i = int(r["t"]) - 1, int(r["i"]) - 1
            acts[t, i] = int(r["a"])
            sts[t, i] = int(r["l"])
        if np.any(acts < 0) or np.any(sts < 0):
            raise ValueError("trial CSV does not cover every (t, i)")
        init = np.zeros(N, dtype=np.int64) if initial_state is None else initial_state
        return cls(acts, sts, n_arms, n_states, init)


def _looks_like_path(source: str | Path) -> bool:
    if isinstance(source, Path):
        return True
    return "\n" not in source and Path(source).exists()


def pad_history(
    actions: NDArray, states: NDArray, initial_state: ArrayLike, pad: int
) -> tuple[NDArray[np.int8], NDArray[np.int8]]:
    """Prepend ``pad`` rounds of arm 0 and the initial states to (P, T, N) arrays."""
    P, T, N = actions.shape
    A = np.zeros((P, pad + T, N), dtype=np.int8)
    L = np.empty((P, pad + T, N), dtype=np.int8)
    L[:, :pad, :] = np.asarray(initial_state, dtype=np.int8)[None, None, :]
    A[:, pad:, :] = actions
    L[:, pad:, :] = states
    return A, L


@dataclass(frozen=True, eq=False)
class TransitionTable:
    """Conditional law ``q(l | c)`` over a finite context set, one row per code."""

    probs: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", validate_rows(self.probs, "transition table"))

    @property
    def n_contexts(self) -> int:
        return int(self.probs.shape[0])

    @property
    def n_states(self) -> int:
        return int(self.probs.shape[1])

    def rows(self, codes: ArrayLike) -> NDArray[np.float64]:
        codes = np.asarray(codes)
        if codes.size and (codes.min() < 0 or codes.max() >= self.n_contexts):
            raise ModelMismatchError("context code outside the transition table")
        return self.probs[codes]

    def mix(self, other: "TransitionTable", eps: float) -> "TransitionTable":
        """The path ``(1 - eps) * self + eps * other``."""
        return TransitionTable((1.0 - eps) * self.probs + eps * other.probs)

    def tilt(self, eps: float, direction: NDArray[np.float64]) -> "TransitionTable":
        """Exponential tilt ``q * exp(eps * direction)`` renormalized per row."""
        return TransitionTable(exp_tilt(self.probs, eps, direction))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TransitionTable) and np.array_equal(self.probs, other.probs)

    def to_dict(self) -> dict[str, Any]:
        return {"n_contexts": self.n_contexts, "n_states": self.n_states, "rows": self.probs.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "TransitionTable":
        return cls(np.asarray(payload["rows"], dtype=np.float64))


def exp_tilt(probs: NDArray, eps: float, direction: NDArray) -> NDArray[np.float64]:
    """Row-wise ``p * exp(eps * d) / sum``, computed stably."""
    logits = eps * direction
    logits = logits - logits.max(axis=1, keepdims=True)
    w = probs * np.exp(logits)
    tot = w.sum(axis=1, keepdims=True)
    out = w / tot
    # rounding can leave a row a few ulps off; one more pass fixes it
    return out / out.sum(axis=1, keepdims=True)


DESIGN_FAMILIES = ("uniform", "epsilon-greedy", "ucb", "neyman", "fixed-table")


@dataclass(frozen=True, eq=False)
class DesignRule:
    """Arm-assignment law ``g(a | c_A)`` with its family tag and design state.

    ``theta`` holds the design parameters in force (JSON-friendly scalars or
    lists) and ``theta_code`` the finite summary of them that contexts may read.
    """

    family: str
    probs: NDArray[np.float64]
    theta: Mapping[str, Any] = field(default_factory=dict)
    theta_code: int = 0

    def __post_init__(self) -> None:
        if self.family not in DESIGN_FAMILIES:
            raise ValueError(f"unknown design family {self.family!r}")
        object.__setattr__(self, "probs", validate_rows(self.probs, f"{self.family} design"))
        object.__setattr__(self, "theta", dict(self.theta))

    @property
    def n_contexts(self) -> int:
        return int(self.probs.shape[0])

    @property
    def n_arms(self) -> int:
        return int(self.probs.shape[1])

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "rows": self.probs.tolist(),
            "theta": self.theta,
            "theta_code": self.theta_code,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "DesignRule":
        return cls(
            payload["family"],
            np.asarray(payload["rows"], dtype=np.float64),
            payload.get("theta", {}),
            int(payload.get("theta_code", 0)),
        )

    @classmethod
    def uniform(cls, n_contexts: int, n_arms: int) -> "DesignRule":
        return cls("uniform", np.full((n_contexts, n_arms), 1.0 / n_arms))

    @classmethod
    def static_arm(cls, n_contexts: int, n_arms: int, arm: int) -> "DesignRule":
        """Deterministic rule assigning ``arm`` in every context."""
        if not 0 <= arm < n_arms:
            raise ValueError(f"arm {arm} outside 0..{n_arms - 1}")
        probs = np.zeros((n_contexts, n_arms))
        probs[:, arm] = 1.0
        return cls("fixed-table", probs, {"arm": arm})

    @classmethod
    def fixed(cls, probs: ArrayLike) -> "DesignRule":
        return cls("fixed-table", np.asarray(probs, dtype=np.float64))


@dataclass(frozen=True)
class NetworkStructure:
    """Clusters, per-unit contact sets and history depth of a scenario.

    Contact sets are static over rounds. Units are 0-based.
    """

    n_units: int
    clusters: tuple[tuple[int, ...], ...] = ()
    friends_l: tuple[tuple[int, ...], ...] = ()
    friends_a: tuple[tuple[int, ...], ...] = ()
    memory: int = 1
    cluster_bound: int | None = None

    def __post_init__(self) -> None:
        if self.clusters:
            members = sorted(u for c in self.clusters for u in c)
            if members != list(range(self.n_units)):
                raise ValueError("clusters must partition the units")
            if self.cluster_bound is not None and max(len(c) for c in self.clusters) > self.cluster_bound:
                raise ValueError("a cluster exceeds the declared bound")
        for sets in (self.friends_l, self.friends_a):
            if sets and (len(sets) != self.n_units or any(not 0 <= j < self.n_units for s in sets for j in s)):
                raise ValueError("friend sets must list valid units for every unit")
        if self.memory < 1:
            raise ValueError("memory must be at least 1")

    def cluster_of(self, unit: int) -> tuple[int, ...]:
        for c in self.clusters:
            if unit in c:
                return c
        return (unit,)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_units": self.n_units,
            "clusters": [list(c) for c in self.clusters],
            "friends_l": [list(c) for c in self.friends_l],
            "friends_a": [list(c) for c in self.friends_a],
            "memory": self.memory,
            "cluster_bound": self.cluster_bound,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "NetworkStructure":
        tup = lambda xs: tuple(tuple(int(u) for u in x) for x in xs)  # noqa: E731
        return cls(
            int(payload["n_units"]),
            tup(payload.get("clusters", [])),
            tup(payload.get("friends_l", [])),
            tup(payload.get("friends_a", [])),
            int(payload.get("memory", 1)),
            payload.get("cluster_bound"),
        )


def history_views(data: TrialData, node: NodeId, kind: str) -> list[tuple[str, NodeId, int]]:
    """Nodes preceding ``A(t,i)`` (kind ``"A"``) or ``L(t,i)`` (kind ``"L"``).

    Returns ``(variable, node, value)`` triples in column order.
    """
    column_index(node, data.n_units, data.n_rounds)
    if kind not in ("A", "L"):
        raise ValueError("kind must be 'A' or 'L'")
    out: list[tuple[str, NodeId, int]] = []
    for t in range(1, node.t):
        out += [("A", NodeId(t, j), int(data.actions[t - 1, j - 1])) for j in range(1, data.n_units + 1)]
        out += [("L", NodeId(t, j), int(data.states[t - 1, j - 1])) for j in range(1, data.n_units + 1)]
    t = node.t
    if kind == "A":
        out += [("A", NodeId(t, j), int(data.actions[t - 1, j - 1])) for j in range(1, node.i)]
    else:
        out += [("A", NodeId(t, j), int(data.actions[t - 1, j - 1])) for j in range(1, data.n_units + 1)]
        out += [("L", NodeId(t, j), int(data.states[t - 1, j - 1])) for j in range(1, node.i)]
    return out


def dumps_json(payload: Any) -> str:
    """Deterministic JSON text (sorted keys, fixed separators); non-finite floats become null."""
    return json.dumps(_finite(payload), sort_keys=True, indent=2, default=_json_default, allow_nan=False) + "\n"


def _finite(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def as_int_array(values: Sequence[int] | NDArray) -> NDArray[np.int64]:
    return np.asarray(values, dtype=np.int64)


def summarize_context(spec: Any, data: TrialData, node: NodeId, kind: str) -> int:
    """Context code of ``A(t,i)`` (kind ``"A"``) or ``L(t,i)`` (kind ``"L"``) in observed data.

    Rounds before the first are padded with the scenario's initial states.
    """
    column_index(node, data.n_units, data.n_rounds)
    if kind not in ("A", "L"):
        raise UnsupportedError(f"no {kind!r} summarizer; kinds are 'A' and 'L'")
    pad = spec.memory
    A, L = data.padded(pad)
    theta = 0 if data.theta is None else int(data.theta[node.t - 1])
    return int(spec.summarize(A, L, pad + node.t - 1, node.i - 1, kind, theta)[0])


def observed_contexts(spec: Any, data: TrialData) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """(T, N) state-context and arm-context codes of every node."""
    pad = spec.memory
    A, L = data.padded(pad)
    T, N = data.n_rounds, data.n_units
    theta = np.zeros(T, dtype=np.int64) if data.theta is None else data.theta
    cL = np.zeros((T, N), dtype=np.int64)
    cA = np.zeros((T, N), dtype=np.int64)
    lsum, asum = spec.l_summarizer, spec.a_summarizer
    for t in range(T):
        tt = pad + t
        if spec.unit_local:
            cA[t] = asum.codes_all(A, L, tt, theta[t])[0]
            cL[t] = lsum.codes_all(A, L, tt, theta[t])[0]
            continue
        for i in range(N):
            cA[t, i] = asum.codes(A, L, tt, i, theta[t])[0]
            cL[t, i] = lsum.codes(A, L, tt, i, theta[t])[0]
    return cL, cA


@dataclass(frozen=True)
class PositivityReport:
    """Smallest design probability over reachable arm contexts."""

    passed: bool
    min_prob: float
    offending: tuple[tuple[int, int], ...]
    reachable: tuple[int, ...]


def check_positivity(spec: Any, design: "DesignRule", horizon: int | None = None) -> PositivityReport:
    """Check ``g(a | c) > 0`` for every arm at every arm context reachable within ``horizon`` rounds."""
    from .simulation import context_marginals

    horizon = spec.tau if horizon is None else horizon
    marg = context_marginals(spec, design, horizon, kind="A")
    reach = np.flatnonzero(marg.h.sum(axis=(0, 1)) > 0)
    probs = design.probs[reach]
    bad = tuple((int(reach[r]), int(a)) for r, a in zip(*np.nonzero(probs <= 0)))
    low = float(probs.min()) if probs.size else 1.0
    return PositivityReport(not bad, low, bad, tuple(int(c) for c in reach))
