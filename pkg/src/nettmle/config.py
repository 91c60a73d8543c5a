"""Validated experiment configuration (JSON with a version field)."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core import DesignRule
from .estimators import EstimatorSettings
from .lattice import DEFAULT_BUDGET
from .scenarios import ScenarioSpec, Target, as_target, build_scenario, contrast

CONFIG_VERSION = 1
STUDY_KINDS = ("coverage", "type1", "fclt", "design-adapt", "mle-rate")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScenarioConfig(_Strict):
    """A named builder with parameters, a scenario JSON file, or an inline scenario JSON object."""

    builder: str | None = None
    params: dict[str, Any] = Field(default_factory=dict)
    path: str | None = None
    inline: dict[str, Any] | None = None

    @model_validator(mode="after")
    def _one_source(self) -> "ScenarioConfig":
        given = [self.builder is not None, self.path is not None, self.inline is not None]
        if sum(given) != 1:
            raise ValueError("give exactly one of builder, path or inline")
        return self

    def build(self, base_dir: Path | None = None) -> ScenarioSpec:
        if self.builder is not None:
            return build_scenario(self.builder, **self.params)
        if self.inline is not None:
            return ScenarioSpec.from_dict(self.inline)
        path = Path(self.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScenarioSpec.from_dict(json.loads(path.read_text()))


class RuleConfig(_Strict):
    """``uniform``, ``static-arm`` (always ``arm``) or ``fixed-table`` with ``rows``.

    A single row is repeated over every arm context.
    """

    family: Literal["uniform", "static-arm", "fixed-table"] = "uniform"
    rows: list[list[float]] | None = None
    arm: int | None = None

    @model_validator(mode="after")
    def _fields(self) -> "RuleConfig":
        if self.family == "fixed-table" and self.rows is None:
            raise ValueError("fixed-table needs rows")
        if self.family == "static-arm" and self.arm is None:
            raise ValueError("static-arm needs arm")
        return self

    def build(self, spec: ScenarioSpec) -> DesignRule:
        n_c, K = spec.n_a_contexts, spec.n_arms
        if self.family == "uniform":
            return DesignRule.uniform(n_c, K)
        if self.family == "static-arm":
            return DesignRule.static_arm(n_c, K, self.arm)
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.shape[0] == 1:
            rows = np.tile(rows, (n_c, 1))
        return DesignRule.fixed(rows)


class DesignConfig(_Strict):
    """Fixed rule or an adaptive family started from ``rule``.

    ``select`` re-chooses among ``candidates`` by the smallest variance
    criterion; the bandit families update from per-arm estimates.
    """

    kind: Literal["fixed", "select", "epsilon-greedy", "ucb", "neyman"] = "fixed"
    rule: RuleConfig = RuleConfig()
    candidates: list[RuleConfig] = Field(default_factory=list)
    initial: int = 0
    update_every: int = 10
    first_update: int | None = None
    epsilon: float = Field(0.1, ge=0, le=1)
    ucb_c: float = 2.0
    floor: float = Field(0.05, ge=0, lt=1)
    chi_horizon: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _candidates(self) -> "DesignConfig":
        if self.kind == "select":
            if not self.candidates:
                raise ValueError("select needs at least one candidate")
            if not 0 <= self.initial < len(self.candidates):
                raise ValueError("initial candidate index out of range")
        return self

    def update_rounds(self, T: int) -> list[int]:
        first = self.first_update if self.first_update is not None else self.update_every + 1
        return list(range(max(first, 2), T + 1, self.update_every))

    def initial_rule(self, spec: ScenarioSpec) -> DesignRule:
        if self.kind == "select":
            return self.candidates[self.initial].build(spec)
        return self.rule.build(spec)


class TargetConfig(_Strict):
    """The scenario's target rule, "always arm a", or a contrast of two arms (second minus first)."""

    kind: Literal["spec", "arm", "contrast"] = "spec"
    arms: list[int] = Field(default_factory=list)

    def build(self, spec: ScenarioSpec) -> Target:
        if self.kind == "spec":
            return spec.target()
        need = 1 if self.kind == "arm" else 2
        if len(self.arms) != need or not spec.arm_rules:
            raise ValueError(f"target {self.kind} needs {need} arm index(es) on a scenario with arm rules")
        if self.kind == "arm":
            return as_target(spec.arm_rules[self.arms[0]])
        return contrast(spec.arm_rules[self.arms[0]], spec.arm_rules[self.arms[1]])


class EstimatorConfig(_Strict):
    nuisance: Literal["oracle", "tabular", "hal"] = "tabular"
    method: Literal["onestep", "tmle", "both"] = "both"
    rep: Literal[1, 2, 3] | None = None
    backend: Literal["auto", "markov", "window", "mc"] = "auto"
    shrinkage: float = Field(0.5, ge=0)
    tol: float = Field(0.1, gt=0)
    max_iter: int = Field(20, ge=0)
    budget: float = DEFAULT_BUDGET
    hal_lambdas: list[float] = Field(default_factory=lambda: [1e-1, 3e-2, 1e-2, 3e-3, 1e-3])

    def settings(self) -> EstimatorSettings:
        return EstimatorSettings(
            self.nuisance,
            self.method,
            self.rep,
            self.backend,
            self.shrinkage,
            self.tol,
            self.max_iter,
            self.budget,
            tuple(self.hal_lambdas),
        )


class StoppingConfig(_Strict):
    alpha: float = Field(0.05, gt=0, lt=1)
    t0: float = Field(0.25, gt=0, le=1)
    family: Literal["constant", "sqrt"] = "constant"
    mc_paths: int = Field(100_000, ge=100)
    grid_size: int = Field(2048, ge=1)
    band_seed: int = 0
    null_value: float = 0.0
    inflate: float = Field(1.0, gt=0)


class TrialConfig(_Strict):
    """Horizon, units (unit-local scenarios may be resized) and estimate checkpoints.

    Without explicit ``checkpoints`` every ``checkpoint_every`` rounds are
    used (every round by default).
    """

    n_rounds: int = Field(50, ge=1)
    n_units: int | None = Field(None, ge=1)
    checkpoints: list[int] | None = None
    checkpoint_every: int = Field(1, ge=1)

    def checkpoint_list(self, start: int = 1) -> list[int]:
        if self.checkpoints is not None:
            cps = sorted(set(int(c) for c in self.checkpoints))
            return [c for c in cps if c >= start]
        cps = list(range(self.n_rounds, start - 1, -self.checkpoint_every))[::-1]
        return cps


class FcltConfig(_Strict):
    increments: int = Field(4, ge=2)


class MleRateConfig(_Strict):
    n_grid: list[int] = Field(default_factory=lambda: [250, 1000, 4000])
    erm_alpha: float = Field(1 / 3, gt=0, lt=1)
    erm_p: float = Field(1.0, gt=0, lt=2)


class ExperimentConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    study: Literal["coverage", "type1", "fclt", "design-adapt", "mle-rate"] = "coverage"
    replications: int = Field(0, ge=0)
    seed: int = 0
    output_dir: str | None = None
    workers: int = Field(1, ge=1)
    skip_failed: bool = False
    level: float = Field(0.95, gt=0, lt=1)
    scenario: ScenarioConfig
    design: DesignConfig = DesignConfig()
    target: TargetConfig = TargetConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    stopping: StoppingConfig = StoppingConfig()
    trial: TrialConfig = TrialConfig()
    fclt: FcltConfig = FcltConfig()
    mle_rate: MleRateConfig = MleRateConfig()

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.model_validate_json(Path(path).read_text())

    def burn_in_round(self) -> int:
        return max(1, math.ceil(self.stopping.t0 * self.trial.n_rounds - 1e-9))
