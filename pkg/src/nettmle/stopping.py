"""Wiener confidence bands and the sequential test built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .estimators import EstimateRecord

BAND_FAMILIES = ("constant", "sqrt")


@dataclass(frozen=True)
class StopPlan:
    """Band ``a(x)`` on ``[t0, 1]`` for a trial of ``T_max`` rounds.

    ``constant``: ``a(x) = u``; ``sqrt``: ``a(x) = c sqrt(x)``. ``scale`` is
    ``u`` or ``c``.
    """

    alpha: float
    t0: float
    family: str
    scale: float
    grid_size: int
    mc_paths: int
    seed: int
    coverage_se: float
    T_max: int | None = None
    checkpoints: tuple[int, ...] = ()
    meta: dict[str, Any] = field(default_factory=dict)

    def band(self, x: float | NDArray) -> NDArray[np.float64] | float:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, self.scale) if self.family == "constant" else self.scale * np.sqrt(x)
        return float(out) if out.ndim == 0 else out

    def grid(self) -> NDArray[np.float64]:
        k = np.arange(1, self.grid_size + 1)
        x = k / self.grid_size
        return x[x >= self.t0 - 1e-12]

    def inflate(self, factor: float) -> "StopPlan":
        return StopPlan(**{**self.__dict__, "scale": self.scale * factor})

    def to_dict(self) -> dict[str, Any]:
        g = self.grid()
        return {
            "level": self.alpha,
            "t0": self.t0,
            "family": self.family,
            "scale": self.scale,
            "grid": g.tolist(),
            "band": np.broadcast_to(self.band(g), g.shape).tolist(),
            "T_max": self.T_max,
            "checkpoints": list(self.checkpoints),
            "mc": {"paths": self.mc_paths, "grid_size": self.grid_size, "seed": self.seed, "coverage_se": self.coverage_se},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "StopPlan":
        mc = payload["mc"]
        return cls(
            float(payload["level"]),
            float(payload["t0"]),
            payload["family"],
            float(payload["scale"]),
            int(mc["grid_size"]),
            int(mc["paths"]),
            int(mc["seed"]),
            float(mc["coverage_se"]),
            payload.get("T_max"),
            tuple(payload.get("checkpoints", ())),
            dict(payload.get("meta", {})),
        )


def _path_maxima(
    family: str, t0: float, grid_size: int, paths: int, seed: int, chunk: int = 2000
) -> NDArray[np.float64]:
    """Per path ``max |W(x)|`` (constant) or ``max |W(x)| / sqrt(x)`` (sqrt) over grid points ``x >= t0``."""
    rng = np.random.default_rng(seed)
    x = np.arange(1, grid_size + 1) / grid_size
    keep = x >= t0 - 1e-12
    scale = 1.0 if family == "constant" else 1.0 / np.sqrt(x[keep])
    out = np.empty(paths)
    sd = math.sqrt(1.0 / grid_size)
    for start in range(0, paths, chunk):
        n = min(chunk, paths - start)
        w = np.cumsum(rng.normal(0.0, sd, size=(n, grid_size)), axis=1)
        out[start : start + n] = np.abs(w[:, keep] * scale).max(axis=1)
    return out


def wiener_band(
    alpha: float = 0.05,
    t0: float = 0.25,
    family: str = "constant",
    mc_paths: int = 100_000,
    grid_size: int = 2048,
    seed: int = 0,
    T_max: int | None = None,
) -> StopPlan:
    """Smallest band with simulated coverage of a Brownian path on ``[t0, 1]`` at least ``1 - alpha``.

    Paths are Gaussian random walks on ``k / grid_size``; the band scale is the
    ``ceil((1 - alpha) M)``-th order statistic of the per-path maxima.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0 < t0 <= 1:
        raise ValueError("t0 must lie in (0, 1]")
    if family not in BAND_FAMILIES:
        raise ValueError(f"family must be one of {BAND_FAMILIES}")
    m = _path_maxima(family, t0, grid_size, mc_paths, seed)
    k = math.ceil((1 - alpha) * mc_paths)
    scale = float(np.partition(m, k - 1)[k - 1])
    se = math.sqrt(alpha * (1 - alpha) / mc_paths)
    return StopPlan(alpha, t0, family, scale, grid_size, mc_paths, seed, se, T_max)


def band_coverage(plan: StopPlan, paths: int = 100_000, seed: int = 1) -> float:
    """Fraction of fresh random-walk paths that stay inside the band on its grid."""
    m = _path_maxima(plan.family, plan.t0, plan.grid_size, paths, seed)
    return float(np.mean(m <= plan.scale))


def normal_quantile(alpha: float) -> float:
    return float(stats.norm.ppf(1 - alpha / 2))


@dataclass(frozen=True)
class SequentialResult:
    stop_time: int | None
    checkpoints: tuple[int, ...]
    statistics: tuple[float, ...]
    boundary: tuple[float, ...]

    @property
    def rejected(self) -> bool:
        return self.stop_time is not None

    @property
    def terminal(self) -> float:
        return self.statistics[-1] if self.statistics else float("nan")


def sequential_test(
    records: Sequence[EstimateRecord] | Sequence[tuple[int, float]],
    sigma: float,
    N: int,
    plan: StopPlan,
    psi0: float,
    T_max: int | None = None,
) -> SequentialResult:
    """First checkpoint ``T >= t0 T_max`` with ``|psi_T - psi0| > sigma sqrt(T_max/T) a(T/T_max) / sqrt(N T)``.

    Equivalently ``x sqrt(N T_max) |psi_T - psi0| / sigma > a(x)`` with
    ``x = T / T_max``. Earlier checkpoints are skipped; the fold stops at
    the first rejection.
    """
    T_max = plan.T_max if T_max is None else T_max
    if T_max is None:
        raise ValueError("T_max is needed")
    pairs = [(r.checkpoint, r.estimate) if isinstance(r, EstimateRecord) else (int(r[0]), float(r[1])) for r in records]
    cps, st, bd = [], [], []
    for T, psi in pairs:
        x = T / T_max
        if x < plan.t0 - 1e-12:
            continue
        stat = x * math.sqrt(N * T_max) * (psi - psi0) / sigma
        a = plan.band(x)
        cps.append(T)
        st.append(stat)
        bd.append(a)
        if abs(stat) > a:
            return SequentialResult(T, tuple(cps), tuple(st), tuple(bd))
    return SequentialResult(None, tuple(cps), tuple(st), tuple(bd))


# ------------------------------------------------------------------ type-I study


@dataclass(frozen=True)
class TypeOneResult:
    rate: float
    se: float
    stop_times: tuple[int, ...]  # -1 when the test never rejected
    terminal: tuple[float, ...]

    def to_csv(self) -> str:
        lines = ["rep,stop_time,terminal_stat"]
        lines += [f"{k},{s},{z!r}" for k, (s, z) in enumerate(zip(self.stop_times, self.terminal))]
        return "\n".join(lines) + "\n"


def stop_replication(
    spec,
    design,
    plan: StopPlan,
    seed,
    psi0: float,
    settings=None,
    target=None,
    adaptive_hook=None,
) -> SequentialResult:
    """One trial to ``plan.T_max`` tested at the plan's checkpoints.

    The boundary's sigma is frozen at the first checkpoint at or after burn-in.
    """
    from .estimators import estimate_sequence

    if plan.T_max is None or not plan.checkpoints:
        raise ValueError("the plan needs T_max and checkpoints")
    cps = [t for t in plan.checkpoints if t >= plan.t0 * plan.T_max - 1e-9]
    _, recs = estimate_sequence(spec, design, plan.T_max, cps, settings, seed, adaptive_hook=adaptive_hook, target=target)
    return sequential_test(recs, recs[0].sigma_inf, spec.n_units, plan, psi0)


def type_one_error_study(
    spec,
    design,
    plan: StopPlan,
    replications: int,
    seed: int = 0,
    settings=None,
    target=None,
    null_value: float = 0.0,
) -> TypeOneResult:
    """Rejection rate of the sequential test over independent trials of a null scenario.

    Raises:
        ValueError: the scenario's exact target value differs from ``null_value``.
    """
    from .scenarios import as_target
    from .simulation import gcomp_exact

    target = spec.target() if target is None else as_target(target)
    psi0 = gcomp_exact(spec, target).value
    if abs(psi0 - null_value) > 1e-10:
        raise ValueError(f"not a null scenario: Psi(q0) = {psi0!r}, null value {null_value!r}")
    stops, term = [], []
    for s in np.random.SeedSequence(seed).spawn(replications):
        res = stop_replication(spec, design, plan, s, null_value, settings, target)
        stops.append(-1 if res.stop_time is None else res.stop_time)
        term.append(res.terminal)
    rej = np.asarray(stops) >= 0
    p = float(rej.mean()) if replications else float("nan")
    se = math.sqrt(p * (1 - p) / replications) if replications else float("nan")
    return TypeOneResult(p, se, tuple(stops), tuple(term))
