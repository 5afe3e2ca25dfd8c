import csv
import io
import json

import pytest
import yaml

from lapstrat import cli
from lapstrat.config import ConfigError, RunConfig, from_dict, load
from lapstrat.pipeline import MissingArtifactError, PipelineError, run_all, run_stage

SMALL = {
    "synth": {"preset": "oval-1km", "n_cars": {"LMP1": 2, "LMP2": 2, "LMGTE_Pro": 2, "LMGTE_Am": 2}, "n_laps": 10},
    "optimize": {"population": 12, "generations": 2, "patience": None, "elitism": 2},
    "simulate": {"n_sims": 6, "start_lap": 4, "export_traces": 1},
    "evaluate": {"dump_trees": 1},
    "stint": {"n_laps": 2, "n_sims": 3, "n_runs": 2, "candidates": 2},
}


def small_config(out, seed=11, **extra) -> RunConfig:
    data = {**SMALL, "seed": seed, "out": str(out), **extra}
    return from_dict(data)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_all(small_config(out))
    return out, report


def test_small_run_outputs(small_run):
    out, report = small_run
    assert report.startswith("winning strategy: ")
    index = json.loads((out / "manifest.json").read_text())
    assert list(index["stages"]) == sorted(["synth", "ingest", "stats", "optimize", "simulate", "evaluate", "stint"])
    man = json.loads((out / "evaluate" / "manifest.json").read_text())
    assert "evaluation.csv" in man["outputs"] and man["inputs"]["seeds"]["path"] == "simulate/seeds.csv"
    assert not any(str(out) in json.dumps(json.loads(p.read_text())) for p in out.rglob("manifest.json"))
    assert list((out / "evaluate").glob("tree_0000_s*.txt"))
    summary = yaml.safe_load((out / "stint" / "summary.yaml").read_text())
    assert summary["n_laps"] == 2 and len(summary["ci_s"]) == 2


def test_ingest_rejects_only_planted_outliers(small_run):
    out, _ = small_run
    planted = {(int(r["car"]), int(r["lap"])) for r in csv.DictReader(io.StringIO(
        (out / "synth" / "planted_outliers.csv").read_text()))}
    rejected = {(int(r["car"]), int(r["lap"])) for r in csv.DictReader(io.StringIO(
        (out / "ingest" / "rejections.csv").read_text()))}
    assert planted and rejected == planted


def test_same_seed_same_manifests(small_run, tmp_path):
    out, report = small_run
    again = tmp_path / "again"
    assert run_all(small_config(again)) == report
    for p in sorted(out.rglob("manifest.json")):
        assert (again / p.relative_to(out)).read_bytes() == p.read_bytes()


def test_stage_order_enforced(tmp_path):
    cfg = small_config(tmp_path / "o")
    run_stage("synth", cfg)
    with pytest.raises(MissingArtifactError, match="run ingest first"):
        run_stage("stats", cfg)
    run_stage("ingest", cfg)
    run_stage("stats", cfg)
    with pytest.raises(MissingArtifactError, match="run simulate first"):
        run_stage("evaluate", cfg)


def test_stochastic_stage_needs_seed(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        run_stage("synth", small_config(tmp_path, seed=None))


def test_output_lock(tmp_path):
    (tmp_path / ".lock").write_text("1")
    with pytest.raises(PipelineError, match="locked"):
        run_stage("synth", small_config(tmp_path))
    assert (tmp_path / ".lock").exists()


def test_config_overrides_and_errors(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "simulate": {"n_sims": 50}}))
    cfg = load(path, {"simulate.n_sims": 7, "stint.baseline": 2, "out": None})
    assert cfg.seed == 3 and cfg.simulate.n_sims == 7 and cfg.stint.baseline == 2 and cfg.out == "run"
    assert from_dict(yaml.safe_load(cfg.to_yaml())) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"simulate": {"n_simz": 3}})
    with pytest.raises(ConfigError, match="does not exist"):
        load(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError, match="paths.geometry"):
        from_dict({"paths": {"geometry": str(tmp_path / "nope.csv")}}).validate()


def test_cli_errors_exit_with_status_2(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path)]) == 2
    assert "needs a seed" in capsys.readouterr().err
    assert cli.main(["synth", "--seed", "1", "--set", "bogus"]) == 2
    assert cli.main(["synth", "--seed", "1", "--set", "synth.colour=red", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        cli.main(["fly"])


def test_cli_stage(tmp_path):
    args = ["synth", "--seed", "2", "--out", str(tmp_path), "--set", "synth.preset=oval-1km",
            "--set", "synth.n_laps=5"]
    assert cli.main(args) == 0
    assert (tmp_path / "synth" / "track.csv").exists()
    assert json.loads((tmp_path / "synth" / "manifest.json").read_text())["config"]["synth"]["n_laps"] == 5
