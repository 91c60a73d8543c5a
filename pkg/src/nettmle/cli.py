"""Command line entry point: ``nettmle simulate|estimate|study|band|scenario``."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError

from .adaptive import round_trace
from .audit import audit_scenario
from .config import ExperimentConfig
from .core import TrialData, dumps_json
from .eif import eif_components
from .estimators import estimate_sequence, fit_nuisance, realized_design, record_dict, records_to_csv, tmle
from .harness import StudyError, build_context, make_hook, run_experiment
from .simulation import simulate_trial
from .stopping import band_coverage, wiener_band

WORKERS_ENV = "NETTMLE_WORKERS"


def _load(path: str | None, seed: int | None, **overrides) -> tuple[ExperimentConfig, Path | None]:
    if path is None:
        raise click.UsageError("--config is required")
    try:
        payload = json.loads(Path(path).read_text())
        if seed is not None:
            payload["seed"] = seed
        payload.update({k: v for k, v in overrides.items() if v is not None})
        cfg = ExperimentConfig.model_validate(payload)
    except (ValidationError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"invalid config {path}: {exc}") from exc
    return cfg, Path(path).resolve().parent


def _out(out: str | None, cfg: ExperimentConfig | None, default: str) -> Path:
    p = Path(out or (cfg.output_dir if cfg and cfg.output_dir else default))
    p.mkdir(parents=True, exist_ok=True)
    return p


config_opt = click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), help="Experiment config JSON.")
seed_opt = click.option("--seed", type=int, default=None, help="Override the config seed.")
out_opt = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")


@click.group()
def main() -> None:
    """Adaptive network trials: simulation, targeted estimation and sequential testing."""


def _simulate(cfg: ExperimentConfig, base: Path | None):
    ctx = build_context(cfg.model_copy(update={"study": "coverage"}), base)
    hook = make_hook(cfg, ctx.spec, ctx.target)
    data = simulate_trial(ctx.spec, ctx.design, cfg.trial.n_rounds, seed=np.random.SeedSequence(cfg.seed), adaptive_hook=hook)
    return ctx, hook, data


@main.command()
@config_opt
@seed_opt
@out_opt
def simulate(config, seed, out):
    """Draw one trial and write trial.csv (plus design_trace.csv for adaptive designs)."""
    cfg, base = _load(config, seed)
    ctx, hook, data = _simulate(cfg, base)
    d = _out(out, cfg, "results")
    (d / "scenario.json").write_text(dumps_json(ctx.spec.to_dict()))
    data.to_csv(d / "trial.csv")
    idx = cfg.design.initial if cfg.design.kind == "select" else -1
    trace = hook.trace if hook is not None else None
    if trace is not None:
        round_trace(trace, data.n_rounds, ctx.design, idx).to_csv(str(d / "design_trace.csv"))
    click.echo(f"wrote {data.n_rounds} rounds x {data.n_units} units to {d / 'trial.csv'}")


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Trial CSV to analyse instead of simulating.")
def estimate(config, seed, out, data_path):
    """Estimate at every checkpoint; writes estimates.csv, eif.csv and summary.json."""
    cfg, base = _load(config, seed)
    if data_path is not None:
        ctx = build_context(cfg.model_copy(update={"study": "coverage"}), base)
        data = TrialData.from_csv(data_path, ctx.spec.n_arms, ctx.spec.n_states, ctx.spec.initial_state)
        if cfg.design.kind != "fixed":
            raise click.ClickException("a trial CSV carries no design schedule; estimate adaptive trials from a simulation")
    else:
        ctx, _, data = _simulate(cfg, base)
    spec = ctx.spec.with_units(data.n_units)
    settings = cfg.estimator.settings()
    cps = [c for c in cfg.trial.checkpoint_list() if c <= data.n_rounds]
    _, recs = estimate_sequence(spec, ctx.design, data.n_rounds, cps, settings, data=data, target=ctx.target)
    design = realized_design(data, ctx.design if data.design_schedule is None else None)
    fit = fit_nuisance(spec, data, settings)
    if settings.method == "onestep":
        bundle = eif_components(spec, fit.probs, data, design, rep=settings.rep, target=ctx.target)
    else:
        _, res = tmle(spec, fit, data, design, settings.tol, settings.max_iter, ctx.target, settings)
        bundle = res.bundle
    d = _out(out, cfg, "results")
    records_to_csv(recs, str(d / "estimates.csv"))
    bundle.to_csv(str(d / "eif.csv"))
    last = recs[-1]
    lo, hi = last.interval(cfg.level)
    summary = {"records": [record_dict(r) for r in recs], "final": {"estimate": last.estimate, "ci": [lo, hi], "level": cfg.level}, "psi0": ctx.psi0}
    (d / "summary.json").write_text(dumps_json(summary))
    click.echo(f"estimate {last.estimate:.6f}  {cfg.level:.0%} CI [{lo:.6f}, {hi:.6f}]")


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--workers", type=int, default=None, help=f"Parallel workers (default: ${WORKERS_ENV} or the config).")
@click.option("--skip-failed", is_flag=True, default=False, help="Record failed replications and continue.")
def study(config, seed, out, workers, skip_failed):
    """Run the configured replication study."""
    env = os.environ.get(WORKERS_ENV)
    workers = workers if workers is not None else (int(env) if env else None)
    cfg, base = _load(config, seed, workers=workers, skip_failed=skip_failed or None)
    try:
        summary = run_experiment(cfg, out, base)
    except StudyError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps(summary["results"], sort_keys=True, indent=2))
    if summary["violations"]:
        for v in summary["violations"]:
            click.echo(f"violation: {v}", err=True)
        sys.exit(1)


@main.command()
@config_opt
@seed_opt
@out_opt
def band(config, seed, out):
    """Simulate the stopping band of the config's stopping section; writes plan.json."""
    cfg, _ = _load(config, seed) if config else (None, None)
    st = cfg.stopping if cfg else ExperimentConfig.model_fields["stopping"].default
    s = st.band_seed if seed is None else seed
    T = cfg.trial.n_rounds if cfg else None
    plan = wiener_band(st.alpha, st.t0, st.family, st.mc_paths, st.grid_size, s, T)
    check = band_coverage(plan, st.mc_paths, s + 1)
    plan = plan.__class__(**{**plan.__dict__, "meta": {"independent_coverage": check}})
    d = _out(out, cfg, "results")
    (d / "plan.json").write_text(dumps_json(plan.to_dict()))
    click.echo(f"{plan.family} band scale {plan.scale:.6f} (independent coverage {check:.4f})")


@main.group()
def scenario() -> None:
    """Build or audit a scenario."""


@scenario.command("build")
@config_opt
@out_opt
def scenario_build(config, out):
    """Write the config's scenario as scenario.json."""
    cfg, base = _load(config, None)
    spec = cfg.scenario.build(base)
    d = _out(out, cfg, "results")
    (d / "scenario.json").write_text(dumps_json(spec.to_dict()))
    click.echo(f"wrote {spec.name} ({spec.model_class}) to {d / 'scenario.json'}")


@scenario.command("audit")
@config_opt
@out_opt
def scenario_audit(config, out):
    """Run the model-class audit; exit status 1 when it fails."""
    cfg, base = _load(config, None)
    spec = cfg.scenario.build(base)
    report = audit_scenario(spec, budget=cfg.estimator.budget)
    text = dumps_json(report.to_dict())
    if out:
        (_out(out, cfg, "results") / "audit.json").write_text(text)
    click.echo(text, nl=False)
    if not report.passed:
        sys.exit(1)


if __name__ == "__main__":
    main()
