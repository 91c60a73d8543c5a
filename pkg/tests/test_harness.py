import json

import pytest
from pydantic import ValidationError

from nettmle.config import ExperimentConfig
from nettmle.harness import StudyError, build_context, csv_schema, run_experiment

BEST_ARM = {"builder": "best-arm", "params": {"n_units": 3, "tau": 2, "seed": 1}}


def _cfg(**kw):
    payload = {"version": 1, "scenario": BEST_ARM, "trial": {"n_rounds": 12}, **kw}
    return ExperimentConfig.model_validate(payload)


def _read(path):
    return path.read_text()


def test_empty_study_writes_empty_tables(tmp_path):
    summary = run_experiment(_cfg(study="coverage", replications=0), tmp_path)
    assert summary["violations"] == []
    res = summary["results"]
    assert res["replications"] == 0 and res["coverage"]["rate"] is None
    assert _read(tmp_path / "replications.csv").splitlines() == ["rep,estimate,sigma,lower,upper,covered"]
    for name in ("scenario.json", "summary.json", "timing.json", "csv_columns.json"):
        assert (tmp_path / name).exists()


def test_summary_is_byte_identical_across_runs(tmp_path):
    cfg = _cfg(study="coverage", replications=6, seed=4)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert _read(tmp_path / "a" / "summary.json") == _read(tmp_path / "b" / "summary.json")
    assert _read(tmp_path / "a" / "replications.csv") == _read(tmp_path / "b" / "replications.csv")


def test_results_do_not_depend_on_worker_count(tmp_path):
    cfg = _cfg(study="coverage", replications=4, seed=9)
    run_experiment(cfg, tmp_path / "one")
    run_experiment(cfg.model_copy(update={"workers": 2}), tmp_path / "two")
    assert _read(tmp_path / "one" / "summary.json") == _read(tmp_path / "two" / "summary.json")


def test_replications_draw_independent_streams(tmp_path):
    run_experiment(_cfg(study="coverage", replications=5, seed=2), tmp_path)
    est = [line.split(",")[1] for line in _read(tmp_path / "replications.csv").splitlines()[1:]]
    assert len(set(est)) == 5


def test_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        _cfg(study="coverage", colour="red")
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"scenario": {**BEST_ARM, "extra": 1}})
    with pytest.raises(ValidationError):
        _cfg(study="bootstrap")


def test_shipped_configs_validate():
    from pathlib import Path

    for path in sorted(Path(__file__).parent.parent.joinpath("configs").glob("*.json")):
        ExperimentConfig.load(path)


def test_kind_mismatch_is_refused():
    with pytest.raises(StudyError):
        build_context(_cfg(study="design-adapt"))
    # type1 needs a scenario under the null
    with pytest.raises(StudyError):
        build_context(_cfg(study="type1"))


def test_failed_replication_aborts_unless_skipped(tmp_path):
    cluster = {"builder": "cluster-mdp", "params": {"n_clusters": 2, "cluster_size": 2, "tau": 2}}
    cfg = ExperimentConfig.model_validate(
        {"scenario": cluster, "study": "coverage", "replications": 2, "estimator": {"budget": 50}, "trial": {"n_rounds": 6}}
    )
    with pytest.raises(StudyError, match="budget"):
        run_experiment(cfg, tmp_path / "abort")
    summary = run_experiment(cfg.model_copy(update={"skip_failed": True}), tmp_path / "skip")
    assert summary["failed_replications"] == 2
    assert len(json.loads(_read(tmp_path / "skip" / "failures.json"))) == 2


def test_single_candidate_is_always_selected(tmp_path):
    cfg = _cfg(
        study="design-adapt",
        replications=3,
        design={"kind": "select", "candidates": [{"family": "uniform"}], "update_every": 4, "chi_horizon": 40},
    )
    res = run_experiment(cfg, tmp_path)["results"]
    assert res["median_kstar_share"] == 1.0
    assert all(v == 1.0 for v in res["kstar_frequency_by_update"].values())


def test_fclt_summary_reports_ks_and_increments(tmp_path):
    cfg = _cfg(study="fclt", replications=30, estimator={"nuisance": "oracle", "method": "onestep"}, fclt={"increments": 3})
    res = run_experiment(cfg, tmp_path)["results"]
    assert 0 <= res["ks"]["statistic"] <= 1
    assert len(res["increment_corr"]) == 3 and res["checkpoints"] == [4, 8, 12]


def test_type1_summary_and_plan(tmp_path):
    null = {"builder": "best-arm", "params": {"n_units": 3, "tau": 2, "rows": [[[0.6, 0.4], [0.3, 0.7]]] * 2}}
    cfg = ExperimentConfig.model_validate(
        {
            "scenario": null,
            "study": "type1",
            "replications": 5,
            "target": {"kind": "contrast", "arms": [0, 1]},
            "estimator": {"nuisance": "oracle", "method": "onestep"},
            "stopping": {"mc_paths": 2000, "grid_size": 256},
            "trial": {"n_rounds": 20, "checkpoint_every": 5},
        }
    )
    res = run_experiment(cfg, tmp_path)["results"]
    assert res["rejection"]["n"] == 5 and res["checkpoints"] == 4
    plan = json.loads(_read(tmp_path / "plan.json"))
    assert plan["checkpoints"] == [5, 10, 15, 20] and plan["level"] == 0.05


@pytest.mark.slow
def test_tabular_error_rate_is_root_n(tmp_path):
    cfg = ExperimentConfig.load(__import__("pathlib").Path(__file__).parent.parent / "configs" / "mle_rate.json")
    res = run_experiment(cfg.model_copy(update={"replications": 20}), tmp_path)["results"]
    assert -0.65 <= res["slope"] <= -0.35
    assert res["erm_headline_exponent"] == pytest.approx(-1 / (4 - 2 / 3))


def test_schema_lists_every_study():
    schema = csv_schema()
    for kind in ("coverage", "type1", "fclt", "design-adapt", "mle-rate"):
        assert kind in json.dumps(schema)
