"""Context summarizers: map a history window to a finite integer code.

Every summarizer reads batched history arrays ``A`` and ``L`` of shape
(P, W, N) where axis 1 indexes rounds and ``tt`` is the position of the
current round inside that window. Fields are combined with a mixed-radix
encoding so that ``decode`` recovers them exactly.
"""

from __future__ import annotations

from functools import reduce
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray


def encode(fields: Sequence[NDArray | int], radices: Sequence[int]) -> NDArray[np.int64]:
    """Mixed-radix code, first field most significant."""
    code: NDArray[np.int64] | int = 0
    for value, radix in zip(fields, radices):
        code = code * radix + np.asarray(value, dtype=np.int64)
    return np.asarray(code, dtype=np.int64)


def decode(codes: NDArray | int, radices: Sequence[int]) -> NDArray[np.int64]:
    """Inverse of :func:`encode`; returns (..., n_fields)."""
    rem = np.asarray(codes, dtype=np.int64)
    out = []
    for radix in reversed(radices):
        out.append(rem % radix)
        rem = rem // radix
    return np.stack(out[::-1], axis=-1)


class Summarizer:
    """Base class. Subclasses define ``radices``, ``memory`` and ``fields``."""

    kind: str = "L"
    memory: int = 1
    unit_local: bool = False
    radices: tuple[int, ...] = ()
    name: str = "summarizer"

    @property
    def n_codes(self) -> int:
        return int(reduce(lambda x, y: x * y, self.radices, 1))

    def fields(self, A: NDArray, L: NDArray, tt: int, i: int, theta: Any) -> list[NDArray]:
        raise NotImplementedError

    def codes(self, A: NDArray, L: NDArray, tt: int, i: int, theta: Any = 0) -> NDArray[np.int64]:
        if tt < self.memory:
            raise IndexError(f"window position {tt} is shorter than memory {self.memory}")
        fields = self.fields(A, L, tt, i, theta)
        fields = [np.broadcast_to(np.asarray(f, dtype=np.int64), (A.shape[0],)) for f in fields]
        return encode(fields, self.radices)

    def decode(self, codes: NDArray | int) -> NDArray[np.int64]:
        return decode(codes, self.radices)

    def features(self, codes: NDArray) -> NDArray[np.float64]:
        """Ordinal embedding used by basis-expansion density estimators."""
        return self.decode(codes).astype(np.float64)

    def descriptor(self) -> dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "memory": self.memory, "radices": list(self.radices)}


class ConstantSummarizer(Summarizer):
    """Single-code context (the rule ignores the past)."""

    name = "constant"
    unit_local = True

    def __init__(self, kind: str = "A") -> None:
        self.kind = kind
        self.radices = (1,)

    def fields(self, A, L, tt, i, theta):
        return [0]

    def codes_all(self, A, L, tt, theta=0):
        return np.zeros((A.shape[0], A.shape[2]), dtype=np.int64)


class UnitMarkovA(Summarizer):
    """Arm context ``(theta, l(t-1, i))`` of independent per-unit chains."""

    kind = "A"
    name = "unit-markov-a"
    unit_local = True

    def __init__(self, n_states: int, n_theta: int = 1) -> None:
        self.n_states = n_states
        self.n_theta = n_theta
        self.radices = (n_theta, n_states)

    def fields(self, A, L, tt, i, theta):
        return [theta, L[:, tt - 1, i]]

    def codes_all(self, A, L, tt, theta=0):
        th = np.asarray(theta, dtype=np.int64).reshape(-1, 1)
        return th * self.n_states + L[:, tt - 1, :].astype(np.int64)

    def descriptor(self):
        return {**super().descriptor(), "n_states": self.n_states, "n_theta": self.n_theta}


class UnitMarkovL(Summarizer):
    """State context ``(a(t, i), theta, l(t-1, i))``; decomposes into (arm, arm context)."""

    kind = "L"
    name = "unit-markov-l"
    unit_local = True

    def __init__(self, n_arms: int, n_states: int, n_theta: int = 1) -> None:
        self.n_arms = n_arms
        self.n_states = n_states
        self.n_theta = n_theta
        self.radices = (n_arms, n_theta, n_states)

    @property
    def n_a_codes(self) -> int:
        return self.n_theta * self.n_states

    def fields(self, A, L, tt, i, theta):
        return [A[:, tt, i], theta, L[:, tt - 1, i]]

    def codes_all(self, A, L, tt, theta=0):
        th = np.asarray(theta, dtype=np.int64).reshape(-1, 1)
        a_code = th * self.n_states + L[:, tt - 1, :].astype(np.int64)
        return A[:, tt, :].astype(np.int64) * self.n_a_codes + a_code

    def decompose(self, codes: NDArray | int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        """Split an L-context code into (arm, arm-context code)."""
        codes = np.asarray(codes, dtype=np.int64)
        return codes // self.n_a_codes, codes % self.n_a_codes

    def compose(self, arms: NDArray | int, a_codes: NDArray | int) -> NDArray[np.int64]:
        return np.asarray(arms, dtype=np.int64) * self.n_a_codes + np.asarray(a_codes, dtype=np.int64)

    def descriptor(self):
        return {**super().descriptor(), "n_arms": self.n_arms, "n_states": self.n_states, "n_theta": self.n_theta}


def _cluster_members(clusters: Sequence[Sequence[int]], n_units: int) -> list[tuple[int, ...]]:
    """For each unit, its cluster with self first and the others in cluster order."""
    out: list[tuple[int, ...]] = [()] * n_units
    for c in clusters:
        c = sorted(c)
        for u in c:
            out[u] = (u, *[v for v in c if v != u])
    return out


class ClusterL(Summarizer):
    """Cluster MDP state context.

    Fields, for unit ``i`` and the other members ``j`` of its cluster:
    same-round ``l(t, j)`` for ``j < i`` (``n_states`` marks "not yet drawn"),
    ``a(t, i)``, ``a(t, j)``, ``l(t-1, i)``, ``l(t-1, j)``.
    """

    kind = "L"
    name = "cluster-l"

    def __init__(self, clusters: Sequence[Sequence[int]], n_units: int, n_arms: int, n_states: int) -> None:
        sizes = {len(c) for c in clusters}
        if len(sizes) != 1:
            raise ValueError("cluster summaries need equal-size clusters")
        self.size = sizes.pop()
        self.n_arms = n_arms
        self.n_states = n_states
        self.members = _cluster_members(clusters, n_units)
        m = self.size - 1
        self.radices = (n_states + 1,) * m + (n_arms,) * (m + 1) + (n_states,) * (m + 1)

    def fields(self, A, L, tt, i, theta):
        mem = self.members[i]
        same = [L[:, tt, j] if j < i else self.n_states for j in mem[1:]]
        arms = [A[:, tt, j] for j in mem]
        prev = [L[:, tt - 1, j] for j in mem]
        return same + arms + prev

    def descriptor(self):
        return {**super().descriptor(), "members": [list(m) for m in self.members]}


class ClusterA(Summarizer):
    """Arm context read from the previous round.

    ``scope="cluster"`` uses ``l(t-1, H_k(i))`` (self first); ``scope="global"``
    uses the population count of units whose previous state is nonzero, which
    couples clusters under the counterfactual rule.
    """

    kind = "A"

    def __init__(self, clusters: Sequence[Sequence[int]], n_units: int, n_states: int, scope: str = "cluster") -> None:
        if scope not in ("cluster", "global"):
            raise ValueError("scope must be 'cluster' or 'global'")
        self.scope = scope
        self.name = f"cluster-a-{scope}"
        self.n_units = n_units
        self.members = _cluster_members(clusters, n_units)
        if scope == "cluster":
            self.radices = (n_states,) * len(self.members[0])
        else:
            self.radices = (n_units + 1,)

    def fields(self, A, L, tt, i, theta):
        if self.scope == "global":
            return [np.count_nonzero(L[:, tt - 1, :], axis=1)]
        return [L[:, tt - 1, j] for j in self.members[i]]

    def descriptor(self):
        return {**super().descriptor(), "scope": self.scope}


class HouseholdL(Summarizer):
    """Censored contact summary for binary "may leave household" arms.

    A unit sees contact ``j`` at round ``s`` when ``a(s, i) = 1`` and ``j`` is in
    its contact set, or ``a(s, i) = 0`` and ``j`` shares its household. Censored
    entries are coded 0 and uncensored ones as ``1 + value``, so the pair
    (value * seen, seen) is recoverable. Contact slots are padded to
    ``slots - 1`` others so that every unit has the same radices.
    """

    kind = "L"
    name = "household-l"

    def __init__(
        self,
        households: Sequence[Sequence[int]],
        contacts: Sequence[Sequence[int]],
        n_units: int,
        n_states: int,
        memory: int = 1,
        slots: int | None = None,
    ) -> None:
        self.n_arms = 2
        self.n_states = n_states
        self.memory = memory
        home = [()] * n_units
        for h in households:
            for u in h:
                home[u] = tuple(sorted(h))
        self.home = [frozenset(h) for h in home]
        friends = []
        for u in range(n_units):
            others = [v for v in home[u] if v != u]
            others += [v for v in sorted(contacts[u]) if v not in home[u] and v != u]
            friends.append(tuple(others))
        need = 1 + max(len(f) for f in friends)
        self.slots = need if slots is None else slots
        if self.slots < need:
            raise ValueError(f"{need} contact slots needed, got {slots}")
        self.friends = [f + (-1,) * (self.slots - 1 - len(f)) for f in friends]
        # seen[i][a, slot]: is the slot visible when unit i plays arm a
        self.seen = np.zeros((n_units, 2, self.slots - 1), dtype=np.int64)
        for u, f in enumerate(self.friends):
            for k, v in enumerate(f):
                if v < 0:
                    continue
                self.seen[u, 0, k] = v in self.home[u]
                self.seen[u, 1, k] = 1
        m, K, S, t0 = self.slots - 1, 2, n_states, memory
        self.radices = (
            (S + 2,) * m  # same-round others
            + (K,) * (t0 + 1)  # own arms
            + (K + 1,) * (m * (t0 + 1))  # others' arms
            + (S,) * t0  # own past states
            + (S + 1,) * (m * t0)  # others' past states
        )

    def fields(self, A, L, tt, i, theta):
        t0 = self.memory
        own_now = A[:, tt, i].astype(np.int64)
        out: list[NDArray | int] = []
        for k, j in enumerate(self.friends[i]):
            if j < 0 or j >= i:
                out.append(self.n_states + 1 if j > i else 0)
                continue
            vis = self.seen[i, own_now, k]
            out.append(vis * (1 + L[:, tt, j]))
        for s in range(tt - t0, tt + 1):
            out.append(A[:, s, i])
        for s in range(tt - t0, tt + 1):
            own = A[:, s, i].astype(np.int64)
            for k, j in enumerate(self.friends[i]):
                out.append(0 if j < 0 else self.seen[i, own, k] * (1 + A[:, s, j]))
        for s in range(tt - t0, tt):
            out.append(L[:, s, i])
        for s in range(tt - t0, tt):
            own = A[:, s, i].astype(np.int64)
            for k, j in enumerate(self.friends[i]):
                out.append(0 if j < 0 else self.seen[i, own, k] * (1 + L[:, s, j]))
        return out

    def descriptor(self):
        return {
            **super().descriptor(),
            "friends": [list(f) for f in self.friends],
            "households": sorted({tuple(sorted(h)) for h in self.home}),
        }
