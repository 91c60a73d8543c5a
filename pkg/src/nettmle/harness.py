"""Seeded replication studies and their on-disk outputs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .adaptive import BanditHook, SelectionHook, chi_variance, select_design
from .audit import audit_scenario
from .config import ExperimentConfig
from .core import DesignRule, check_positivity, dumps_json
from .eif import eif_table
from .estimators import EstimateRecord, estimate_sequence, plug_in
from .nuisance import erm_rate_rn, fit_hal_lasso, fit_tabular_mle
from .scenarios import ScenarioSpec, Target
from .simulation import context_marginals, simulate_trial
from .stopping import StopPlan, stop_replication, wiener_band

log = logging.getLogger(__name__)

ROW_COLUMNS = {
    "coverage": ("rep", "estimate", "sigma", "lower", "upper", "covered"),
    "type1": ("rep", "stop_time", "terminal_stat"),
    "fclt": ("rep", "terminal_stat", "sigma", "path"),
    "design-adapt": ("rep", "estimate", "sigma", "kstar_share", "selections"),
    "mle-rate": ("rep", "n", "tv_error"),
}


class StudyError(RuntimeError):
    """A replication failed and the study was not told to skip failures."""


@dataclass
class StudyContext:
    """Quantities shared by every replication, computed once from the config."""

    spec: ScenarioSpec
    target: Target
    design: DesignRule
    psi0: float
    psi0_se: float
    checkpoints: list[int]
    plan: StopPlan | None = None
    sigma0: float | None = None
    chi: list[float] = field(default_factory=list)
    kstar: int | None = None
    h_bar: dict[int, list[float]] = field(default_factory=dict)


# ------------------------------------------------------------------ building


def _spec_for(cfg: ExperimentConfig, base_dir: Path | None = None) -> ScenarioSpec:
    spec = cfg.scenario.build(base_dir)
    if cfg.trial.n_units is not None:
        spec = spec.with_units(cfg.trial.n_units)
    return spec


def make_hook(cfg: ExperimentConfig, spec: ScenarioSpec, target: Target) -> Callable | None:
    d = cfg.design
    rounds = d.update_rounds(cfg.trial.n_rounds)
    if d.kind == "fixed":
        return None
    if d.kind == "select":
        cands = [c.build(spec) for c in d.candidates]
        return SelectionHook(spec, cands, rounds, target, d.chi_horizon, cfg.estimator.shrinkage)
    return BanditHook(spec, d.kind, rounds, d.epsilon, d.ucb_c, d.floor, cfg.estimator.shrinkage)


def build_context(cfg: ExperimentConfig, base_dir: Path | None = None) -> StudyContext:
    spec = _spec_for(cfg, base_dir)
    target = cfg.target.build(spec)
    design = cfg.design.initial_rule(spec)
    budget = cfg.estimator.budget
    psi0, se0 = plug_in(spec, spec.q0.probs, target, budget)
    T = cfg.trial.n_rounds
    ctx = StudyContext(spec, target, design, psi0, se0, cfg.trial.checkpoint_list())
    kind = cfg.study
    if kind == "type1":
        if se0 > 0 or abs(psi0 - cfg.stopping.null_value) > 1e-10:
            raise StudyError(
                f"type1 needs a null scenario: Psi(q0) = {psi0!r} differs from the null value {cfg.stopping.null_value!r}"
            )
        st = cfg.stopping
        plan = wiener_band(st.alpha, st.t0, st.family, st.mc_paths, st.grid_size, st.band_seed, T)
        if st.inflate != 1.0:
            plan = plan.inflate(st.inflate)
        ctx.checkpoints = cfg.trial.checkpoint_list(cfg.burn_in_round())
        ctx.plan = StopPlan(**{**plan.__dict__, "checkpoints": tuple(ctx.checkpoints)})
    elif kind == "fclt":
        m = cfg.fclt.increments
        ctx.checkpoints = sorted({max(1, round(T * k / m)) for k in range(1, m + 1)})
        if cfg.design.kind == "fixed":
            tab = eif_table(spec, spec.q0.probs, design, T, target=target, budget=budget)
            ctx.sigma0 = math.sqrt(tab.variance)
    elif kind == "design-adapt":
        if cfg.design.kind != "select":
            raise StudyError("design-adapt needs design.kind = 'select'")
        cands = [c.build(spec) for c in cfg.design.candidates]
        ctx.chi = [chi_variance(spec, spec.q0.probs, g, target, cfg.design.chi_horizon, budget) for g in cands]
        ctx.kstar = select_design(ctx.chi)
        ctx.checkpoints = [T]
    elif kind == "mle-rate":
        for n in cfg.mle_rate.n_grid:
            Tn = _rounds_for(n, spec.n_units)
            ctx.h_bar[n] = context_marginals(spec, design, Tn, spec.q0.probs, budget=budget).h_bar.tolist()
    else:
        ctx.checkpoints = [T]
    return ctx


def _rounds_for(n: int, n_units: int) -> int:
    if n % n_units:
        raise StudyError(f"sample size {n} is not a multiple of the {n_units} units")
    return n // n_units


# -------------------------------------------------------------- replications


def _sequence(cfg: ExperimentConfig, ctx: StudyContext, seed: np.random.SeedSequence) -> tuple[Any, list[EstimateRecord], Any]:
    hook = make_hook(cfg, ctx.spec, ctx.target)
    data, recs = estimate_sequence(
        ctx.spec,
        ctx.design,
        cfg.trial.n_rounds,
        ctx.checkpoints,
        cfg.estimator.settings(),
        seed,
        adaptive_hook=hook,
        target=ctx.target,
    )
    return data, recs, hook


def _rep_coverage(cfg, ctx, rep, seed):
    _, recs, _ = _sequence(cfg, ctx, seed)
    r = recs[-1]
    lo, hi = r.interval(cfg.level)
    return {"rep": rep, "estimate": r.estimate, "sigma": r.sigma, "lower": lo, "upper": hi, "covered": int(lo <= ctx.psi0 <= hi)}


def _rep_type1(cfg, ctx, rep, seed):
    hook = make_hook(cfg, ctx.spec, ctx.target)
    res = stop_replication(
        ctx.spec, ctx.design, ctx.plan, seed, cfg.stopping.null_value, cfg.estimator.settings(), ctx.target, hook
    )
    return {"rep": rep, "stop_time": -1 if res.stop_time is None else res.stop_time, "terminal_stat": res.terminal}


def _rep_fclt(cfg, ctx, rep, seed):
    _, recs, _ = _sequence(cfg, ctx, seed)
    T, N = cfg.trial.n_rounds, ctx.spec.n_units
    last = recs[-1]
    sigma = ctx.sigma0 if ctx.sigma0 is not None else last.sigma
    path = [(r.checkpoint / T) * math.sqrt(T * N) * (r.estimate - ctx.psi0) / sigma for r in recs]
    studentized = math.sqrt(last.n_nodes) * (last.estimate - ctx.psi0) / last.sigma
    return {"rep": rep, "terminal_stat": studentized, "sigma": last.sigma, "path": path}


def _rep_design(cfg, ctx, rep, seed):
    _, recs, hook = _sequence(cfg, ctx, seed)
    r = recs[-1]
    T = cfg.trial.n_rounds
    late = [k for t, k in hook.selected if t > T / 2]
    share = float(np.mean([k == ctx.kstar for k in late])) if late else float("nan")
    return {"rep": rep, "estimate": r.estimate, "sigma": r.sigma, "kstar_share": share, "selections": [k for _, k in hook.selected]}


def _rep_mle(cfg, ctx, rep, seed):
    n_grid = cfg.mle_rate.n_grid
    n = n_grid[rep % len(n_grid)]
    spec = ctx.spec
    data = simulate_trial(spec, ctx.design, _rounds_for(n, spec.n_units), seed=seed)
    if cfg.estimator.nuisance == "hal":
        fit = fit_hal_lasso(spec, data, cfg.estimator.hal_lambdas)
    else:
        fit = fit_tabular_mle(spec, data, cfg.estimator.shrinkage)
    tv = 0.5 * np.abs(fit.probs - spec.q0.probs).sum(axis=1)
    return {"rep": rep // len(n_grid), "n": n, "tv_error": float(np.asarray(ctx.h_bar[n]) @ tv)}


REPLICATE = {
    "coverage": _rep_coverage,
    "type1": _rep_type1,
    "fclt": _rep_fclt,
    "design-adapt": _rep_design,
    "mle-rate": _rep_mle,
}


def _guarded(kind: str, cfg, ctx, rep: int, seed) -> dict[str, Any]:
    try:
        return REPLICATE[kind](cfg, ctx, rep, seed)
    except Exception as exc:  # failure policy is applied by the caller
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}


def run_replications(cfg: ExperimentConfig, ctx: StudyContext, workers: int | None = None) -> tuple[list[dict], list[dict]]:
    """Run every replication; returns (rows, failures) in replication order.

    Each replication draws from its own child of ``SeedSequence(cfg.seed)``,
    so results do not depend on the worker count.
    """
    n_jobs = cfg.replications * (len(cfg.mle_rate.n_grid) if cfg.study == "mle-rate" else 1)
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_jobs)
    workers = cfg.workers if workers is None else workers
    if workers > 1 and n_jobs > 1:
        out = Parallel(n_jobs=workers)(delayed(_guarded)(cfg.study, cfg, ctx, k, s) for k, s in enumerate(seeds))
    else:
        out = [_guarded(cfg.study, cfg, ctx, k, s) for k, s in enumerate(seeds)]
    failed = [r for r in out if "error" in r]
    if failed and not cfg.skip_failed:
        first = failed[0]
        raise StudyError(f"replication {first['rep']} failed: {first['error']}")
    return [r for r in out if "error" not in r], failed


# ------------------------------------------------------------------ summaries


def _binomial(hits: Sequence[float]) -> dict[str, float | None]:
    n = len(hits)
    if n == 0:
        return {"rate": None, "se": None, "n": 0}
    p = float(np.mean(hits))
    return {"rate": p, "se": math.sqrt(p * (1 - p) / n), "n": n}


def _moments(x: Sequence[float]) -> dict[str, float | None]:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return {"mean": None, "var": None}
    return {"mean": float(x.mean()), "var": float(x.var(ddof=1)) if x.size > 1 else None}


def summarize(cfg: ExperimentConfig, ctx: StudyContext, rows: list[dict]) -> dict[str, Any]:
    kind = cfg.study
    T, N = cfg.trial.n_rounds, ctx.spec.n_units
    out: dict[str, Any] = {"psi0": ctx.psi0, "psi0_se": ctx.psi0_se, "replications": len(rows)}
    if kind == "coverage":
        est = [r["estimate"] for r in rows]
        out["coverage"] = _binomial([r["covered"] for r in rows])
        out["estimate"] = _moments(est)
        out["bias"] = None if not rows else float(np.mean(est) - ctx.psi0)
        out["mean_sigma"] = None if not rows else float(np.mean([r["sigma"] for r in rows]))
    elif kind == "type1":
        rej = [r["stop_time"] >= 0 for r in rows]
        out["rejection"] = _binomial(rej)
        out["alpha"] = cfg.stopping.alpha
        out["band"] = {"family": ctx.plan.family, "scale": ctx.plan.scale, "t0": ctx.plan.t0}
        out["checkpoints"] = len(ctx.checkpoints)
        stops = [r["stop_time"] for r in rows if r["stop_time"] >= 0]
        out["mean_stop_time"] = float(np.mean(stops)) if stops else None
    elif kind == "fclt":
        out["checkpoints"] = ctx.checkpoints
        out["sigma0"] = ctx.sigma0
        if len(rows) > 1:
            z = np.array([r["terminal_stat"] for r in rows])
            ks = stats.kstest(z, "norm")
            paths = np.array([r["path"] for r in rows])
            incr = np.diff(np.concatenate([np.zeros((len(rows), 1)), paths], axis=1), axis=1)
            corr = np.corrcoef(incr, rowvar=False)
            off = corr[~np.eye(len(corr), dtype=bool)]
            dt = np.diff(np.concatenate([[0.0], np.asarray(ctx.checkpoints) / T]))
            out["ks"] = {"statistic": float(ks.statistic), "pvalue": float(ks.pvalue)}
            out["terminal"] = _moments(z)
            out["increment_corr"] = corr.tolist()
            out["max_abs_increment_corr"] = float(np.abs(off).max()) if off.size else 0.0
            out["increment_var"] = incr.var(axis=0, ddof=1).tolist()
            out["increment_var_expected"] = dt.tolist()
        else:
            out["ks"] = None
            out["increment_corr"] = []
    elif kind == "design-adapt":
        shares = [r["kstar_share"] for r in rows if not math.isnan(r["kstar_share"])]
        est = [r["estimate"] for r in rows]
        chis = np.asarray(ctx.chi)
        others = np.delete(chis, ctx.kstar)
        updates = cfg.design.update_rounds(T)
        by_round = np.array([r["selections"] for r in rows]) if rows else np.zeros((0, len(updates)))
        out["chi"] = ctx.chi
        out["kstar"] = ctx.kstar
        out["chi_separation"] = float(others.min() / chis[ctx.kstar] - 1) if others.size else None
        out["median_kstar_share"] = float(np.median(shares)) if shares else None
        out["kstar_frequency_by_update"] = {
            str(t): float(np.mean(by_round[:, j] == ctx.kstar)) for j, t in enumerate(updates)
        } if rows else {}
        out["estimate"] = _moments(est)
        out["chi_kstar_over_nt"] = float(chis[ctx.kstar] / (N * T))
        v = out["estimate"]["var"]
        out["variance_ratio"] = None if v is None else float(v / out["chi_kstar_over_nt"])
    elif kind == "mle-rate":
        grid = cfg.mle_rate.n_grid
        med = {n: float(np.median([r["tv_error"] for r in rows if r["n"] == n])) for n in grid if any(r["n"] == n for r in rows)}
        out["median_tv"] = {str(n): v for n, v in med.items()}
        if len(med) >= 2:
            ns = np.array(sorted(med), dtype=np.float64)
            slope = np.polyfit(np.log(ns), np.log([med[int(n)] for n in ns]), 1)[0]
            out["slope"] = float(slope)
        else:
            out["slope"] = None
        a, p = cfg.mle_rate.erm_alpha, cfg.mle_rate.erm_p
        out["erm_rate"] = {str(n): erm_rate_rn(n, a, p).r_n for n in grid if n > 1}
        out["erm_headline_exponent"] = -1.0 / (4.0 - 2.0 * a)
    return out


# ------------------------------------------------------------------ writing


def _write_rows(path: Path, kind: str, rows: list[dict]) -> None:
    cols = ROW_COLUMNS[kind]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([json.dumps(r[c]) if isinstance(r[c], list) else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])


def csv_schema() -> dict[str, Any]:
    return json.loads(resources.files("nettmle").joinpath("schemas/csv_columns.json").read_text())


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, base_dir: Path | None = None) -> dict[str, Any]:
    """Run the configured study and write its files.

    Writes ``scenario.json``, ``replications.csv``, ``failures.json`` when
    replications were skipped, ``summary.json`` (sorted keys, a pure function
    of the config), ``timing.json`` and a copy of the CSV schema. Returns the
    summary; ``summary["violations"]`` lists invariant failures.
    """
    start = time.perf_counter()
    out_dir = Path(out_dir or cfg.output_dir or "results")
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = build_context(cfg, base_dir)
    violations = []
    pos = check_positivity(ctx.spec, ctx.design, cfg.trial.n_rounds)
    if cfg.design.kind == "fixed" and not pos.passed:
        violations.append(f"design violates positivity (min probability {pos.min_prob})")
    audit = audit_scenario(ctx.spec, budget=cfg.estimator.budget)
    if not audit.passed:
        violations.append("scenario fails its model-class audit")
    (out_dir / "scenario.json").write_text(dumps_json(ctx.spec.to_dict()))
    rows, failed = run_replications(cfg, ctx)
    _write_rows(out_dir / "replications.csv", cfg.study, rows)
    if ctx.plan is not None:
        (out_dir / "plan.json").write_text(dumps_json(ctx.plan.to_dict()))
    if failed:
        (out_dir / "failures.json").write_text(dumps_json(failed))
    summary = {
        "study": cfg.study,
        "seed": cfg.seed,
        "config": cfg.model_dump(mode="json"),
        "audit": audit.to_dict(),
        "failed_replications": len(failed),
        "violations": violations,
        "results": summarize(cfg, ctx, rows),
    }
    # worker count and output location do not change results; keep them out of the summary
    summary["config"].pop("workers")
    summary["config"].pop("output_dir")
    (out_dir / "summary.json").write_text(dumps_json(summary))
    (out_dir / "csv_columns.json").write_text(dumps_json(csv_schema()))
    (out_dir / "timing.json").write_text(dumps_json({"seconds": time.perf_counter() - start, "replications": cfg.replications}))
    return summary

