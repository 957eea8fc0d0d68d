import json
from dataclasses import replace

import numpy as np
import pytest

from gdda import cli
from gdda.data import BenchmarkSpec
from gdda.diffusion import DiffusionSchedule
from gdda.errors import ConfigError
from gdda.pipeline import Epochs, ExperimentConfig, Pipeline, run_lambda_sweep, run_pipeline, run_seeds


def tiny(tmp_path, **kw):
    base = dict(
        benchmark=BenchmarkSpec(graphs_per_cell=3, nodes_min=4, nodes_max=6),
        schedule=DiffusionSchedule(num_steps=5),
        epochs=Epochs(phase1=2, score=2, detector=2),
        score_hidden=16,
        output_dir=str(tmp_path / "run"),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_zero_epoch_smoke_run(tmp_path):
    cfg = tiny(tmp_path, epochs=Epochs(0, 0, 0))
    report = json.loads(run_pipeline(cfg).read_text())
    assert set(report) >= {"auroc", "aupr", "fpr95", "ind_acc", "n_ind", "n_ood", "seed", "config_hash"}
    assert report["n_ind"] == 9 and report["n_ood"] == 3
    assert 0 <= report["auroc"] <= 1
    manifest = json.loads((tmp_path / "run" / "run_manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert [r["stage"] for r in manifest["stages"]] == ["data", "phase1", "score", "pseudo", "detector"]


def test_same_config_and_seed_give_identical_metrics(tmp_path):
    a = run_pipeline(tiny(tmp_path, output_dir=str(tmp_path / "a"))).read_bytes()
    b = run_pipeline(tiny(tmp_path, output_dir=str(tmp_path / "b"))).read_bytes()
    assert a == b


def test_ablation_reuses_upstream_and_is_tagged(tmp_path):
    cache = tmp_path / "cache"
    full = Pipeline(tiny(tmp_path), cache)
    full.evaluate()
    abl = Pipeline(replace(tiny(tmp_path), ablation="no_pseudo_ood"), cache)
    report = abl.evaluate()
    assert report["ablation"] == "no_pseudo_ood"
    cached = {r["stage"]: r["cached"] for r in abl.records}
    # the cached pseudo set means the score net is never even loaded
    assert cached == {"data": True, "phase1": True, "pseudo": True, "detector": False}
    full_digests = {r["stage"]: r["digests"] for r in full.records}
    for r in abl.records:
        if r["stage"] != "detector":
            assert r["digests"] == full_digests[r["stage"]]


def test_baseline_shares_data_split(tmp_path):
    pipe = Pipeline(tiny(tmp_path), tmp_path / "cache")
    pipe.evaluate("gdda")
    report = pipe.evaluate("energy_baseline")
    assert report["method"] == "energy_baseline"
    stages = [(r["stage"], r["method"]) for r in pipe.records]
    assert stages.count(("data", "gdda")) == 1
    assert ("pseudo", "gdda") in stages


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = tiny(tmp_path, seeds=(1, 2))
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.hash() == cfg.hash()
    assert replace(cfg, output_dir="elsewhere").hash() == cfg.hash()
    assert replace(cfg, seed=3).hash() != cfg.hash()
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="config.epochs"):
        ExperimentConfig.from_dict({"epochs": {"phase2": 1}})


@pytest.mark.parametrize("kw", [dict(d1=4), dict(ablation="nope"), dict(lambda_c=0.0),
                                dict(epochs=Epochs(-1, 0, 0))])
def test_invalid_config(tmp_path, kw):
    with pytest.raises(ConfigError):
        tiny(tmp_path, **kw).validate()


def test_lambda_sweep_outputs(tmp_path):
    report = run_lambda_sweep(tiny(tmp_path), [0.0, 0.4])
    assert [r["lambda"] for r in report["rows"]] == [0.0, 0.4]
    sweep = tmp_path / "run" / "sweep"
    assert (sweep / "sweep.csv").read_text().splitlines()[0] == "lambda,mean_distance_c,mean_distance_s"
    rows = (sweep / "projection_lambda_0.4.csv").read_text().splitlines()
    assert rows[0] == "x,y,kind" and {r.rsplit(",", 1)[1] for r in rows[1:]} == {"original", "pseudo_ind", "pseudo_ood"}


def test_seed_aggregate(tmp_path):
    agg = run_seeds(tiny(tmp_path), [0, 1])
    assert agg["seeds"] == [0, 1] and len(agg["per_seed"]) == 2
    vals = [r["auroc"] for r in agg["per_seed"]]
    assert agg["auroc_mean"] == pytest.approx(np.mean(vals))
    assert agg["auroc_std"] == pytest.approx(np.std(vals))


# ---- command line ----------------------------------------------------------

def write_cfg(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny(tmp_path, **kw).to_dict()))
    return path


def test_cli_run_all_and_seed_override(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "cli"
    assert cli.main(["run-all", "--config", str(cfg), "--seed", "5", "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["seed"] == 5
    assert str(out / "metrics.json") in capsys.readouterr().out


def test_cli_stage_by_stage_matches_run_all(tmp_path):
    cfg = write_cfg(tmp_path)
    cache = tmp_path / "cache"
    for cmd in ("gen-data", "train-p1", "train-diff", "gen-pseudo", "train-det", "eval"):
        assert cli.main([cmd, "--config", str(cfg), "--out", str(tmp_path / "staged"),
                         "--stage-cache", str(cache)]) == 0, cmd
    assert cli.main(["run-all", "--config", str(cfg), "--out", str(tmp_path / "whole")]) == 0
    assert (tmp_path / "staged" / "metrics.json").read_bytes() == (tmp_path / "whole" / "metrics.json").read_bytes()


def test_cli_missing_upstream_exits_4(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["train-diff", "--config", str(cfg), "--stage-cache", str(tmp_path / "empty")]) == 4
    manifest = json.loads((tmp_path / "run" / "run_manifest.json").read_text())
    assert manifest["status"] == "error" and "stage data: missing artifact" in manifest["error"]


def test_cli_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"d1": 3}')
    assert cli.main(["run-all", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert cli.main(["run-all", "--config", str(bad)]) == 2
    assert cli.main(["sweep-lambda", "--config", str(write_cfg(tmp_path)), "--lambdas", "a,b"]) == 2
    assert cli.main(["sweep-lambda", "--config", str(write_cfg(tmp_path)), "--lambdas", ""]) == 2


def test_cli_ablate_and_baseline(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(out), "--which", "no_pseudo_ind"]) == 0
    assert json.loads((out / "metrics_no_pseudo_ind.json").read_text())["ablation"] == "no_pseudo_ind"
    assert cli.main(["baseline", "--config", str(cfg), "--out", str(out)]) == 0
    assert json.loads((out / "metrics_energy_baseline.json").read_text())["method"] == "energy_baseline"


def test_cli_multi_seed_aggregate(tmp_path):
    cfg = write_cfg(tmp_path, seeds=(0, 1))
    out = tmp_path / "ms"
    assert cli.main(["run-all", "--config", str(cfg), "--out", str(out)]) == 0
    agg = json.loads((out / "aggregate_gdda.json").read_text())
    assert agg["seeds"] == [0, 1] and "auroc_std" in agg
