import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nettmle.adaptive import best_arm_contrast
from nettmle.core import DesignRule
from nettmle.eif import eif_table
from nettmle.estimators import EstimatorSettings
from nettmle.scenarios import make_best_arm
from nettmle.simulation import gcomp_exact
from nettmle.stopping import (
    StopPlan,
    band_coverage,
    normal_quantile,
    sequential_test,
    stop_replication,
    type_one_error_study,
    wiener_band,
)

ONESTEP_ORACLE = EstimatorSettings(nuisance="oracle", method="onestep")


def _plan(T_max, every, **kw):
    plan = wiener_band(mc_paths=20_000, grid_size=512, seed=3, T_max=T_max, **kw)
    return StopPlan(**{**plan.__dict__, "checkpoints": tuple(range(every, T_max + 1, every))})


def _null_arms(n_units=4, tau=2):
    kernel = np.array([[[0.6, 0.4], [0.3, 0.7]]] * 2)
    spec, _ = make_best_arm(rows=kernel, n_units=n_units, tau=tau)
    return spec, best_arm_contrast(spec)


def test_single_look_band_is_the_normal_quantile():
    plan = wiener_band(0.05, t0=1.0)
    assert plan.scale == pytest.approx(1.96, abs=0.02)
    assert normal_quantile(0.05) == pytest.approx(1.959964, abs=1e-6)


def test_interval_band_exceeds_a_single_look():
    assert wiener_band(0.05, t0=0.25).scale > 1.96


def test_band_is_monotone_in_level_and_burn_in():
    kw = dict(mc_paths=20_000, grid_size=512, seed=5)
    by_alpha = [wiener_band(a, 0.25, **kw).scale for a in (0.01, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(by_alpha, by_alpha[1:]))
    # shared paths: the maximum over a longer interval is pathwise at least as large
    by_t0 = [wiener_band(0.05, t0, **kw).scale for t0 in (0.1, 0.25, 0.5, 0.75)]
    assert all(a >= b for a, b in zip(by_t0, by_t0[1:])) and by_t0[0] > by_t0[-1]


@pytest.mark.parametrize("family", ["constant", "sqrt"])
def test_band_stays_above_the_single_look_floor(family):
    plan = wiener_band(0.05, 0.25, family, mc_paths=20_000, grid_size=512)
    x = plan.grid()
    assert np.all(np.asarray(plan.band(x)) >= math.sqrt(plan.t0) * normal_quantile(0.05))
    assert np.all(np.isfinite(plan.band(x))) and np.all(np.asarray(plan.band(x)) > 0)


@pytest.mark.parametrize("family", ["constant", "sqrt"])
def test_band_coverage_on_an_independent_batch(family):
    plan = wiener_band(0.05, 0.25, family, seed=0)
    assert abs(band_coverage(plan, seed=99) - 0.95) <= 0.01


def test_band_rejects_bad_arguments():
    for kw in ({"alpha": 0.0}, {"alpha": 1.0}, {"t0": 0.0}, {"family": "linear"}):
        with pytest.raises(ValueError):
            wiener_band(**kw)


def test_plan_round_trips_through_json():
    plan = _plan(40, 4)
    d = plan.to_dict()
    assert d["level"] == 0.05 and len(d["band"]) == len(d["grid"])
    assert StopPlan.from_dict(d) == plan


def test_exact_null_sequence_never_rejects():
    plan = _plan(100, 5)
    res = sequential_test([(t, 0.3) for t in plan.checkpoints], 1.0, 10, plan, 0.3)
    assert not res.rejected and all(s == 0 for s in res.statistics)


@pytest.mark.parametrize("gap", [0.05, 0.2])
def test_single_look_reduces_to_a_z_test(gap):
    plan = _plan(100, 100, t0=1.0)
    res = sequential_test([(100, 0.5 + gap)], 0.9, 10, plan, 0.5)
    assert res.rejected == (math.sqrt(10 * 100) * gap / 0.9 > plan.scale)


def test_checkpoints_before_burn_in_are_skipped():
    plan = _plan(100, 5)
    res = sequential_test([(5, 9.0), (20, 9.0), (25, 0.0)], 1.0, 10, plan, 0.0)
    assert res.checkpoints == (25,) and not res.rejected


def test_stop_time_is_the_first_crossing():
    plan = _plan(100, 5)
    pairs = [(25, 0.0), (30, 0.01), (40, 0.5), (50, 0.9)]
    res = sequential_test(pairs, 1.0, 10, plan, 0.0)
    assert res.stop_time == 40 and res.checkpoints == (25, 30, 40)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_infinite_band_never_rejects(psis):
    plan = StopPlan(0.05, 0.1, "constant", math.inf, 64, 1, 0, 0.0, T_max=len(psis))
    res = sequential_test(list(enumerate(psis, 1)), 1.0, 5, plan, 0.0)
    assert not res.rejected


def test_decisions_use_only_data_up_to_the_checkpoint():
    spec, tg = _null_arms()
    plan = _plan(40, 4)
    full = stop_replication(spec, DesignRule.uniform(spec.n_a_contexts, 2), plan, np.random.SeedSequence(4), 0.0, ONESTEP_ORACLE, tg)
    short = StopPlan(**{**plan.__dict__, "checkpoints": tuple(t for t in plan.checkpoints if t <= 24)})
    part = stop_replication(spec, DesignRule.uniform(spec.n_a_contexts, 2), short, np.random.SeedSequence(4), 0.0, ONESTEP_ORACLE, tg)
    # a trial run longer never changes the statistics it already produced
    n = len(part.statistics)
    assert part.statistics == full.statistics[:n]


def test_inflated_band_almost_never_rejects():
    spec, tg = _null_arms()
    plan = _plan(60, 5).inflate(10.0)
    res = type_one_error_study(spec, DesignRule.uniform(spec.n_a_contexts, 2), plan, 100, 1, ONESTEP_ORACLE, tg)
    assert res.rate == 0.0
    assert res.to_csv().splitlines()[0] == "rep,stop_time,terminal_stat"


def test_study_refuses_a_non_null_scenario():
    spec, _ = make_best_arm(n_units=2, tau=2, seed=1)
    tg = best_arm_contrast(spec)
    assert gcomp_exact(spec, tg).value != 0.0
    with pytest.raises(ValueError):
        type_one_error_study(spec, DesignRule.uniform(spec.n_a_contexts, 2), _plan(20, 5), 2, target=tg)


@pytest.mark.slow
def test_power_against_a_separated_alternative():
    d = 0.08
    kernel = np.array([[[0.6, 0.4], [0.3, 0.7]], [[0.6 - d, 0.4 + d], [0.3 - d, 0.7 + d]]])
    spec, _ = make_best_arm(rows=kernel, n_units=10, tau=3)
    tg = best_arm_contrast(spec)
    g = DesignRule.uniform(spec.n_a_contexts, 2)
    delta = gcomp_exact(spec, tg).value
    sigma = math.sqrt(eif_table(spec, None, g, 100, target=tg).variance_inf)
    T_max = round(9 * sigma**2 / (spec.n_units * delta**2))
    assert delta == pytest.approx(3 * sigma / math.sqrt(spec.n_units * T_max), rel=0.01)
    plan = _plan(T_max, 5)
    hits = 0
    for s in np.random.SeedSequence(8).spawn(500):
        hits += stop_replication(spec, g, plan, s, 0.0, ONESTEP_ORACLE, tg).rejected
    assert hits / 500 >= 0.5
