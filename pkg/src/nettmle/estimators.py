"""One-step and targeted estimators, the expansion check and estimate sequences."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .core import BudgetExceededError, DesignRule, TransitionTable, TrialData, exp_tilt, observed_contexts
from .eif import EifBundle, eif_table, remainder_exact
from .lattice import DEFAULT_BUDGET
from .nuisance import FittedDensity, fit_hal_lasso, fit_tabular_mle
from .scenarios import ScenarioSpec, Target, as_target
from .simulation import context_marginals, gcomp_exact, gcomp_mc, q_table, simulate_trial

SEQUENCE_COLUMNS = ("checkpoint", "psi_onestep", "psi_tmle", "sigma", "pn_eif", "iterations")


@dataclass(frozen=True)
class EstimateRecord:
    """Estimates at one checkpoint.

    ``pn_eif`` is ``P_n D-bar`` at the initial fit and ``pn_eif_star`` at the
    targeted fit; ``sigma`` is the node-level standard deviation of ``D-bar``
    at the fit the reported estimate uses, ``sigma_inf`` its tail-law plug-in.
    """

    checkpoint: int
    n_nodes: int
    plugin: float
    psi_onestep: float
    psi_tmle: float | None
    sigma: float
    sigma_inf: float
    pn_eif: float
    pn_eif_star: float | None = None
    iterations: int = 0
    converged: bool = True
    plugin_se: float = 0.0

    @property
    def estimate(self) -> float:
        return self.psi_onestep if self.psi_tmle is None else self.psi_tmle

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + level / 2)
        half = z * self.sigma / math.sqrt(self.n_nodes)
        return self.estimate - half, self.estimate + half

    def row(self) -> list[Any]:
        pn = self.pn_eif if self.pn_eif_star is None else self.pn_eif_star
        tm = "" if self.psi_tmle is None else repr(self.psi_tmle)
        return [self.checkpoint, repr(self.psi_onestep), tm, repr(self.sigma), repr(pn), self.iterations]


def records_to_csv(records: Sequence[EstimateRecord], path: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEQUENCE_COLUMNS)
    for r in records:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# --------------------------------------------------------------------- settings


@dataclass(frozen=True)
class EstimatorSettings:
    """How nuisances and estimates are produced at a checkpoint."""

    nuisance: str = "tabular"  # oracle | tabular | hal
    method: str = "both"  # onestep | tmle | both
    rep: int | None = None
    backend: str = "auto"
    shrinkage: float = 0.5
    tol: float = 0.1
    max_iter: int = 20
    budget: float = DEFAULT_BUDGET
    hal_lambdas: tuple[float, ...] = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)


def fit_nuisance(spec: ScenarioSpec, data: TrialData, settings: EstimatorSettings, seed: int = 0) -> FittedDensity:
    if settings.nuisance == "oracle":
        return FittedDensity("oracle", spec.q0)
    if settings.nuisance == "tabular":
        return fit_tabular_mle(spec, data, settings.shrinkage)
    if settings.nuisance == "hal":
        return fit_hal_lasso(spec, data, settings.hal_lambdas, seed=seed)
    raise ValueError(f"unknown nuisance estimator {settings.nuisance!r}")


def plug_in(
    spec: ScenarioSpec,
    q: NDArray,
    target: Target | None = None,
    budget: float = DEFAULT_BUDGET,
    paths: int = 20_000,
    seed: int = 0,
) -> tuple[float, float]:
    """``Psi(q)`` exactly, or by Monte Carlo with its se when enumeration is over budget."""
    target = spec.target() if target is None else target
    try:
        return gcomp_exact(spec, target, q=q, budget=budget).value, 0.0
    except BudgetExceededError:
        res = gcomp_mc(spec, q, target, paths=paths, seed=seed)
        return res.value, res.se


# ------------------------------------------------------------------- estimators


class _Evaluator:
    """Gradient tables and node values for one dataset; caches the observed contexts."""

    def __init__(self, spec, data, design, settings: EstimatorSettings, target):
        self.spec = spec
        self.data = data
        self.design = design
        self.settings = settings
        self.target = target
        self.codes, _ = observed_contexts(spec, data)
        self.states = np.asarray(data.states, dtype=np.int64)

    def bundle(self, q: NDArray) -> EifBundle:
        s = self.settings
        table = eif_table(
            self.spec, q, self.design, self.data.n_rounds, s.rep, s.backend, self.target, theta=self.data.theta, budget=s.budget
        )
        return EifBundle(table, self.codes, self.states, table.values(self.codes, self.states))


def realized_design(data: TrialData, design: DesignRule | NDArray | None) -> DesignRule | NDArray:
    if design is not None:
        return design
    if data.design_schedule is None:
        raise ValueError("no design given and the data carry no design schedule")
    return data.design_schedule


def one_step(
    spec: ScenarioSpec,
    q_hat: FittedDensity | TransitionTable | NDArray,
    bundle: EifBundle,
    target: DesignRule | Target | None = None,
    budget: float = DEFAULT_BUDGET,
    checkpoint: int | None = None,
) -> EstimateRecord:
    """``Psi(q_hat) + P_n D-bar(q_hat)``; the bundle must be computed at ``q_hat``."""
    q = q_hat.probs if isinstance(q_hat, (FittedDensity, TransitionTable)) else np.asarray(q_hat)
    target = spec.target() if target is None else as_target(target)
    plugin, se = plug_in(spec, q, target, budget)
    T, N = bundle.values.shape
    return EstimateRecord(
        checkpoint=T if checkpoint is None else checkpoint,
        n_nodes=T * N,
        plugin=plugin,
        psi_onestep=plugin + bundle.pn,
        psi_tmle=None,
        sigma=math.sqrt(bundle.sigma2),
        sigma_inf=math.sqrt(bundle.sigma2_inf),
        pn_eif=bundle.pn,
        plugin_se=se,
    )


@dataclass(frozen=True)
class TargetingResult:
    q_star: NDArray[np.float64]
    bundle: EifBundle
    iterations: int
    converged: bool
    path: tuple[float, ...] = field(default=())  # |P_n D-bar| after each accepted step


def _solve_score(direction: NDArray, q: NDArray, counts: NDArray, observed: float) -> float:
    """Root in eps of ``observed - sum_c n_c E_{q_eps}[D | c]``.

    The score is non-increasing in eps (its slope is minus a sum of
    conditional variances), so Newton steps are kept inside a sign bracket
    and replaced by bisection whenever they leave it.
    """
    used = counts > 0
    D, q, n = direction[used], q[used], counts[used]

    def score(eps: float) -> tuple[float, float]:
        p = exp_tilt(q, eps, D)
        m = (p * D).sum(axis=1)
        v = (p * D * D).sum(axis=1) - m * m
        return observed - float(n @ m), -float(n @ v)

    f0, d0 = score(0.0)
    if f0 == 0.0 or d0 == 0.0:
        return 0.0
    step = 1.0 / max(np.abs(D).max(), 1e-300)
    lo, hi = (0.0, step) if f0 > 0 else (-step, 0.0)
    for _ in range(200):
        f_far = score(hi if f0 > 0 else lo)[0]
        if (f_far < 0) if f0 > 0 else (f_far > 0):
            break
        if f0 > 0:
            lo, hi = hi, 2 * hi
        else:
            lo, hi = 2 * lo, lo
    eps = 0.0
    for _ in range(200):
        f, d = score(eps)
        if f == 0.0:
            break
        if f > 0:
            lo = max(lo, eps)
        else:
            hi = min(hi, eps)
        nxt = eps - f / d if d < 0 else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - eps) <= 1e-15 * max(1.0, abs(eps)):
            eps = nxt
            break
        eps = nxt
    return eps


def target_fit(
    evaluator: _Evaluator, q_hat: NDArray, tol: float = 0.1, max_iter: int = 20, first: EifBundle | None = None
) -> TargetingResult:
    """Exponential-tilt targeting until ``|P_n D-bar| <= tol / sqrt(TN)``.

    Each iteration solves the likelihood score equation along
    ``q exp(eps D-bar(q))``; a step that does not shrink ``|P_n D-bar|`` is
    halved up to 30 times and targeting stops if none does.
    """
    q = np.asarray(q_hat, dtype=np.float64)
    b = evaluator.bundle(q) if first is None else first
    n_nodes = b.values.size
    thr = tol / math.sqrt(n_nodes)
    n_ctx = q.shape[0]
    counts = np.bincount(b.codes.ravel(), minlength=n_ctx).astype(np.float64)
    path = [abs(b.pn)]
    it = 0
    while abs(b.pn) > thr and it < max_iter:
        D = b.table.dbar
        eps = _solve_score(D, q, counts, float(b.values.sum()))
        accepted = False
        for _ in range(31):
            if eps == 0.0:
                break
            q_new = exp_tilt(q, eps, D)
            b_new = evaluator.bundle(q_new)
            if abs(b_new.pn) < abs(b.pn):
                accepted = True
                break
            eps *= 0.5
        if not accepted:
            break
        q, b = q_new, b_new
        it += 1
        path.append(abs(b.pn))
    return TargetingResult(q, b, it, abs(b.pn) <= thr, tuple(path))


def tmle(
    spec: ScenarioSpec,
    q_hat: FittedDensity | TransitionTable | NDArray,
    data: TrialData,
    design: DesignRule | NDArray | None = None,
    tol: float = 0.1,
    max_iter: int = 20,
    target: DesignRule | Target | None = None,
    settings: EstimatorSettings | None = None,
    checkpoint: int | None = None,
) -> tuple[EstimateRecord, TargetingResult]:
    """Targeted estimate ``Psi(q*)``; the record also carries the one-step value at ``q_hat``.

    Non-convergence is flagged in the record, never raised.
    """
    settings = settings or EstimatorSettings()
    q0 = q_hat.probs if isinstance(q_hat, (FittedDensity, TransitionTable)) else np.asarray(q_hat)
    target = spec.target() if target is None else as_target(target)
    ev = _Evaluator(spec, data, realized_design(data, design), settings, target)
    first = ev.bundle(q0)
    init = one_step(spec, q0, first, target, settings.budget, checkpoint)
    res = target_fit(ev, q0, tol, max_iter, first)
    psi, se = plug_in(spec, res.q_star, target, settings.budget)
    rec = replace(
        init,
        psi_tmle=psi,
        sigma=math.sqrt(res.bundle.sigma2),
        sigma_inf=math.sqrt(res.bundle.sigma2_inf),
        pn_eif_star=res.bundle.pn,
        iterations=res.iterations,
        converged=res.converged,
        plugin_se=max(init.plugin_se, se),
    )
    return rec, res


def estimate(
    spec: ScenarioSpec,
    data: TrialData,
    design: DesignRule | NDArray | None = None,
    settings: EstimatorSettings | None = None,
    target: DesignRule | Target | None = None,
    seed: int = 0,
) -> EstimateRecord:
    """Fit the nuisance on ``data`` and return the configured estimates."""
    settings = settings or EstimatorSettings()
    fit = fit_nuisance(spec, data, settings, seed)
    target = spec.target() if target is None else as_target(target)
    if settings.method == "onestep":
        ev = _Evaluator(spec, data, realized_design(data, design), settings, target)
        return one_step(spec, fit.probs, ev.bundle(fit.probs), target, settings.budget)
    rec, _ = tmle(spec, fit, data, design, settings.tol, settings.max_iter, target, settings)
    return rec


# -------------------------------------------------------------------- expansion


@dataclass(frozen=True)
class Expansion:
    """``psi_hat - Psi(q0) = M1 + M2 + R + residual``."""

    error: float
    m1: float
    m2: float
    remainder: float
    residual: float


def expansion_diagnostics(
    spec: ScenarioSpec,
    q_star: NDArray | TransitionTable,
    data: TrialData,
    design: DesignRule | NDArray,
    psi_hat: float | None = None,
    target: DesignRule | Target | None = None,
    budget: float = DEFAULT_BUDGET,
) -> Expansion:
    """Exact terms of the first-order expansion around ``q0``.

    ``M1 = P_n D-bar(q0)``; ``M2 = P_n[D-bar(q*) - D-bar(q0)] - E_0[D-bar(q*) - D-bar(q0)]``
    with the expectation over the pooled context law under q0; ``R`` from
    :func:`~nettmle.eif.remainder_exact`. ``psi_hat`` defaults to the one-step
    value ``Psi(q*) + P_n D-bar(q*)``, which a fully targeted fit shares.
    """
    qs = q_table(q_star, spec)
    q0 = spec.q0.probs
    target = spec.target() if target is None else as_target(target)
    settings = EstimatorSettings(rep=2, budget=budget)
    ev = _Evaluator(spec, data, design, settings, target)
    b_star, b_0 = ev.bundle(qs), ev.bundle(q0)
    h0 = context_marginals(spec, design, data.n_rounds, q0, budget=budget).h_bar
    mean0 = lambda tab: float(h0 @ (q0 * tab.dbar).sum(axis=1))  # noqa: E731
    m1 = b_0.pn
    m2 = (b_star.pn - b_0.pn) - (mean0(b_star.table) - mean0(b_0.table))
    rem = remainder_exact(spec, qs, design, data.n_rounds, target=target, budget=budget)
    psi_hat = rem.psi_q + b_star.pn if psi_hat is None else psi_hat
    err = psi_hat - rem.psi_0
    return Expansion(err, m1, m2, rem.value, err - (m1 + m2 + rem.value))


# -------------------------------------------------------------------- sequences


def estimate_sequence(
    spec: ScenarioSpec,
    design: DesignRule | NDArray,
    T_max: int,
    checkpoints: Sequence[int],
    settings: EstimatorSettings | None = None,
    seed: int | np.random.SeedSequence = 0,
    N: int | None = None,
    adaptive_hook: Callable | None = None,
    target: DesignRule | Target | None = None,
    data: TrialData | None = None,
) -> tuple[TrialData, list[EstimateRecord]]:
    """One trial to ``T_max`` and an estimate at each checkpoint from the data so far.

    The nuisance is refit at every checkpoint. Adaptive trials are estimated
    under the design schedule they actually used.
    """
    settings = settings or EstimatorSettings()
    cps = [int(c) for c in checkpoints]
    if cps != sorted(set(cps)) or (cps and (cps[0] < 1 or cps[-1] > T_max)):
        raise ValueError("checkpoints must be increasing rounds within 1..T_max")
    if data is None:
        data = simulate_trial(spec, design, T_max, N, seed, adaptive_hook)
    spec = spec.with_units(data.n_units)
    target = spec.target() if target is None else as_target(target)
    sched = data.design_schedule
    out = []
    for t in cps:
        part = data.truncate(t)
        d = design if sched is None else sched[:t]
        fit = fit_nuisance(spec, part, settings)
        if settings.method == "onestep":
            ev = _Evaluator(spec, part, d, settings, target)
            out.append(one_step(spec, fit.probs, ev.bundle(fit.probs), target, settings.budget, t))
        else:
            out.append(tmle(spec, fit, part, d, settings.tol, settings.max_iter, target, settings, t)[0])
    return data, out


def rescaled_statistics(
    records: Sequence[EstimateRecord], T_max: int, N: int, psi_ref: float, sigma: float
) -> NDArray[np.float64]:
    """``(t / T_max) sqrt(T_max N) (psi_t - psi_ref) / sigma`` per checkpoint."""
    t = np.array([r.checkpoint for r in records], dtype=np.float64)
    psi = np.array([r.estimate for r in records])
    return (t / T_max) * math.sqrt(T_max * N) * (psi - psi_ref) / sigma


def record_dict(rec: EstimateRecord) -> dict[str, Any]:
    return asdict(rec)
