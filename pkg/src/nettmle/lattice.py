"""Exact enumeration of a trial in column order.

A :class:`Lattice` expands the nodes ``A(t,1..N), L(t,1..N)`` round by round.
Each level maps every parent state to its children, one per branch value.
In ``merge`` mode a state is the window of the last ``memory + 1`` rounds and
identical windows are merged, which gives an exact forward/backward dynamic
program whose size does not grow with the horizon. With ``merge=False`` states
are full histories and the lattice is the plain path tree.

Arm branches with zero probability under the build-time support are pruned.
State branches are always kept, including zero-probability ones, so that
conditional values ``E[. | L(s,j) = l, ...]`` exist for every ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import BudgetExceededError, PositivityError
from .scenarios import ScenarioSpec

DEFAULT_BUDGET = 10**7


@dataclass
class Level:
    kind: str  # "A", "L" or "S" (window shift)
    t: int
    i: int
    codes: NDArray[np.int64] | None
    children: NDArray[np.int64]  # (n_parents, branches), -1 where pruned
    n_children: int


def _row_keys(A: NDArray, L: NDArray) -> NDArray:
    flat = np.ascontiguousarray(np.concatenate([A.reshape(len(A), -1), L.reshape(len(L), -1)], axis=1))
    return flat.view(np.dtype((np.void, flat.shape[1] * flat.itemsize))).ravel()


def estimate_leaves(spec: ScenarioSpec, horizon: int, arm_support: NDArray) -> float:
    """Upper bound on the number of tree leaves: branches per node multiplied out."""
    arms = np.asarray(arm_support).reshape(-1, spec.n_arms).sum(axis=1).max()
    return float(arms * spec.n_states) ** (spec.n_units * horizon)


class Lattice:
    """Column-order enumeration of ``horizon`` rounds under a fixed arm support.

    Args:
        spec: scenario providing summarizers, units and initial states.
        arm_tables: (horizon, n_a_contexts, n_arms) or (n_a_contexts, n_arms)
            arm probabilities; only their support is used to prune.
        horizon: number of rounds to expand.
        theta: per-round design-summary codes (defaults to zeros).
        merge: merge identical history windows (dynamic program) or keep the tree.
        budget: maximum number of states on any level.
    """

    def __init__(
        self,
        spec: ScenarioSpec,
        arm_tables: NDArray,
        horizon: int,
        theta: NDArray | None = None,
        merge: bool = True,
        budget: float = DEFAULT_BUDGET,
        keep_states: bool = False,
    ) -> None:
        self.spec = spec
        self.horizon = int(horizon)
        self.merge = merge
        self.budget = budget
        tables = np.asarray(arm_tables, dtype=np.float64)
        if tables.ndim == 2:
            tables = np.broadcast_to(tables, (self.horizon, *tables.shape))
        self.support = tables[: self.horizon] > 0
        self.theta = np.zeros(self.horizon, dtype=np.int64) if theta is None else np.asarray(theta, dtype=np.int64)
        if not merge and estimate_leaves(spec, horizon, self.support[0]) > budget:
            # the estimate is exact for full-support rules and an upper bound otherwise
            self._precheck_budget()
        self.levels: list[Level] = []
        self.states: list[tuple[NDArray, NDArray]] = []
        self.keep_states = keep_states
        self._build()

    def _precheck_budget(self) -> None:
        spec = self.spec
        arms = self.support.reshape(self.horizon, -1, spec.n_arms).sum(axis=2).max(axis=1)
        total = float(np.prod((arms * spec.n_states).astype(float) ** spec.n_units))
        if total > self.budget:
            raise BudgetExceededError(
                f"path tree would hold up to {total:.3g} leaves, over the budget of {self.budget:.3g}"
            )

    @property
    def pad(self) -> int:
        return self.spec.memory

    def position(self, t: int) -> int:
        """Index of round ``t`` (0-based) inside a state window."""
        return self.pad if self.merge else self.pad + t

    def _initial(self) -> tuple[NDArray, NDArray]:
        spec = self.spec
        W = self.pad + 1 if self.merge else self.pad + self.horizon
        A = np.zeros((1, W, spec.n_units), dtype=np.int8)
        L = np.zeros((1, W, spec.n_units), dtype=np.int8)
        L[0, : self.pad, :] = spec.initial_state
        return A, L

    def _merge(self, A: NDArray, L: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        if not self.merge:
            return A, L, np.arange(len(A))
        _, first, inverse = np.unique(_row_keys(A, L), return_index=True, return_inverse=True)
        return A[first], L[first], inverse.ravel()

    def _check(self, n: int) -> None:
        if n > self.budget:
            raise BudgetExceededError(f"enumeration reached {n} states, over the budget of {self.budget:.3g}")

    def _build(self) -> None:
        spec = self.spec
        A, L = self._initial()
        for t in range(self.horizon):
            if self.merge and t > 0:
                self._keep(A, L)
                A2 = np.zeros_like(A)
                L2 = np.zeros_like(L)
                A2[:, :-1] = A[:, 1:]
                L2[:, :-1] = L[:, 1:]
                A, L, inv = self._merge(A2, L2)
                self._push(Level("S", t, -1, None, inv.reshape(-1, 1), len(A)), A, L)
            tt = self.position(t)
            for i in range(spec.n_units):
                codes = spec.a_summarizer.codes(A, L, tt, i, self.theta[t])
                keep = self.support[t][codes]  # (n, K)
                self._keep(A, L)
                A, L, children = self._expand(A, L, tt, i, "A", keep)
                self._push(Level("A", t, i, codes, children, len(A)), None, None)
            for i in range(spec.n_units):
                codes = spec.l_summarizer.codes(A, L, tt, i, self.theta[t])
                keep = np.ones((len(A), spec.n_states), dtype=bool)
                self._keep(A, L)
                A, L, children = self._expand(A, L, tt, i, "L", keep)
                self._push(Level("L", t, i, codes, children, len(A)), None, None)
        self.final_A, self.final_L = A, L

    def _push(self, level: Level, A, L) -> None:
        self.levels.append(level)

    def _keep(self, A: NDArray, L: NDArray) -> None:
        if self.keep_states:
            self.states.append((A, L))

    def _expand(self, A: NDArray, L: NDArray, tt: int, i: int, var: str, keep: NDArray):
        n, B = keep.shape
        self._check(int(keep.sum()))
        parent, branch = np.nonzero(keep)
        A2 = A[parent].copy()
        L2 = L[parent].copy()
        (A2 if var == "A" else L2)[:, tt, i] = branch
        A2, L2, inv = self._merge(A2, L2)
        children = np.full((n, B), -1, dtype=np.int64)
        children[parent, branch] = inv
        return A2, L2, children

    # ------------------------------------------------------------------ sweeps

    def _cond(self, level: Level, l_table: NDArray, a_tables: NDArray) -> NDArray:
        if level.kind == "S":
            return np.ones((len(level.children), 1))
        if level.kind == "A":
            return a_tables[level.t][level.codes]
        return l_table[level.codes]

    def _arm_tables(self, a_tables: NDArray) -> NDArray:
        a_tables = np.asarray(a_tables, dtype=np.float64)
        if a_tables.ndim == 2:
            a_tables = np.broadcast_to(a_tables, (self.horizon, *a_tables.shape))
        return a_tables

    def forward(self, l_table: NDArray, a_tables: NDArray) -> list[NDArray[np.float64]]:
        """Weights of the parent states of every level, plus the final states.

        Branch factors come from ``l_table`` (n_l_contexts, n_states) at state
        levels and ``a_tables`` at arm levels. Mass on pruned arm branches is
        reported as a positivity violation.
        """
        a_tables = self._arm_tables(a_tables)
        w = np.ones(1)
        out = [w]
        for level in self.levels:
            cond = self._cond(level, l_table, a_tables)
            mask = level.children >= 0
            lost = np.where(mask, 0.0, cond * w[:, None])
            if np.any(lost > 0):
                raise PositivityError(f"positive mass on a pruned arm branch at round {level.t + 1}, unit {level.i + 1}")
            nxt = np.zeros(level.n_children)
            np.add.at(nxt, level.children[mask], (cond * w[:, None])[mask])
            w = nxt
            out.append(w)
        return out

    def backward(self, l_table: NDArray, a_tables: NDArray, final_values: NDArray) -> list[NDArray[np.float64]]:
        """Conditional expectations of ``final_values`` at every level's states.

        ``final_values`` has shape (n_final_states, d). The returned list is
        aligned with :meth:`forward`: entry ``k`` holds values for the parent
        states of level ``k``.
        """
        a_tables = self._arm_tables(a_tables)
        v = np.asarray(final_values, dtype=np.float64)
        out = [v]
        for level in reversed(self.levels):
            cond = self._cond(level, l_table, a_tables)
            mask = level.children >= 0
            idx = np.where(mask, level.children, 0)
            v = np.einsum("pb,pbd->pd", np.where(mask, cond, 0.0), v[idx])
            out.append(v)
        return out[::-1]

    def unit_outcomes(self, outcome: NDArray) -> NDArray[np.float64]:
        """(n_final, N) outcome of each unit in the last expanded round."""
        return np.asarray(outcome)[self.final_L[:, self.position(self.horizon - 1), :]]

    def level_index(self, kind: str, t: int, i: int) -> int:
        for k, level in enumerate(self.levels):
            if level.kind == kind and level.t == t and level.i == i:
                return k
        raise KeyError((kind, t, i))

    def state_levels(self) -> list[int]:
        return [k for k, lv in enumerate(self.levels) if lv.kind == "L"]

    def marginals(self, weights: list[NDArray], kind: str = "L") -> NDArray[np.float64]:
        """(horizon, N, n_codes) context distributions at ``kind`` levels."""
        spec = self.spec
        n_codes = spec.n_l_contexts if kind == "L" else spec.n_a_contexts
        out = np.zeros((self.horizon, spec.n_units, n_codes))
        for k, level in enumerate(self.levels):
            if level.kind == kind:
                out[level.t, level.i] = np.bincount(level.codes, weights[k], minlength=n_codes)
        return out

    def numerators(self, weights: list[NDArray], values: list[NDArray], t: int, i: int) -> NDArray[np.float64]:
        """``sum over states with context c of weight * value(child with L(t,i)=l)``.

        Returns (n_l_contexts, n_states, d).
        """
        k = self.level_index("L", t, i)
        level = self.levels[k]
        child_vals = values[k + 1][level.children]  # (n_p, S, d)
        num = np.zeros((self.spec.n_l_contexts, self.spec.n_states, child_vals.shape[2]))
        np.add.at(num, level.codes, weights[k][:, None, None] * child_vals)
        return num

    def path_ratio(
        self, numer_tables: NDArray, denom_tables: NDArray, weights: list[NDArray] | None = None
    ) -> NDArray[np.float64]:
        """Product over arm nodes of ``numer/denom`` along each full path (tree only).

        Raises:
            PositivityError: if a state with positive weight (any state when
                ``weights`` is omitted) meets ``numer > 0`` where ``denom = 0``.
        """
        if self.merge:
            raise ValueError("path products need the unmerged tree")
        numer = self._arm_tables(numer_tables)
        denom = self._arm_tables(denom_tables)
        r = np.ones(1)
        for k, level in enumerate(self.levels):
            if level.kind == "A":
                top, bot = numer[level.t][level.codes], denom[level.t][level.codes]
                bad = (top > 0) & (bot <= 0)
                if weights is not None:
                    bad &= weights[k][:, None] > 0
                if bad.any():
                    raise PositivityError(
                        f"target rule needs an arm the design never plays at round {level.t + 1}, unit {level.i + 1}"
                    )
                cond = np.divide(top, bot, out=np.zeros_like(top), where=bot > 0)
            else:
                cond = np.ones((len(level.children), level.children.shape[1]))
            mask = level.children >= 0
            nxt = np.zeros(level.n_children)
            nxt[level.children[mask]] = (cond * r[:, None])[mask]
            r = nxt
        return r
