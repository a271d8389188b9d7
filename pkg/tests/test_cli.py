import json
import subprocess
import sys

import numpy as np
import pytest

from chaninf import cli, experiments
from chaninf.experiments import ExperimentConfig, run_experiment


def read_runs(path):
    return [json.loads(line) for line in open(path / "runs.jsonl")]


def test_parsers():
    assert cli._widths("2-3-1,2-4-1") == [[2, 3, 1], [2, 4, 1]]
    assert cli._seeds("3:6") == [3, 4, 5]
    assert cli._seeds("1,5") == [1, 5]


def test_flags_and_config_override(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"flow": {"max_steps": 77}, "seeds": [9], "target": {"gp_scale": 2.0}}))
    args = cli.build_parser().parse_args(
        ["--seed", "4", "--out", str(tmp_path / "o"), "--config", str(conf), "train-sweep",
         "--target", "gp_matern32", "--gp-scale", "0.5", "--max-steps", "10", "--seeds", "0:3",
         "--widths", "2-2-1", "--bias", "--h-max", "5.0"])
    cfg = cli.config_from_args(args)
    assert cfg.kind == "train_sweep" and cfg.widths == [[2, 2, 1]] and cfg.has_bias
    assert cfg.flow.max_steps == 77 and cfg.flow.h_max == 5.0
    assert cfg.seeds == [9]
    assert cfg.target.gp_scale == 2.0 and cfg.target.seed == 4


def test_invalid_configuration_exit_code(tmp_path, capsys):
    code = cli.main(["--out", str(tmp_path), "train-sweep", "--widths", "2-3-2"])
    assert code == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_dataset_gen(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["--out", str(out), "dataset-gen", "--target", "rosenbrock_mod", "--n", "6"]) == 0
    rows = np.loadtxt(out / "dataset.csv", delimiter=",", skiprows=1)
    assert rows.shape == (36, 3)
    assert json.loads((out / "dataset.json").read_text())["N"] == 36


def test_train_sweep_outputs_and_reproducibility(tmp_path):
    argv = ["train-sweep", "--target", "rosenbrock_mod", "--n", "5", "--widths", "2-1-1,2-2-1",
            "--seeds", "0:3", "--max-steps", "300", "--stiff-after", "100"]
    assert cli.main(["--out", str(tmp_path / "a")] + argv) == 0
    assert cli.main(["--out", str(tmp_path / "b")] + argv) == 0
    a, b = read_runs(tmp_path / "a"), read_runs(tmp_path / "b")
    assert len(a) == 6
    assert [r["series"] for r in a] == [r["series"] for r in b]
    assert [r["theta"] for r in a] == [r["theta"] for r in b]
    summary = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("config_index,widths,runs") and len(summary) == 3
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert ExperimentConfig.from_dict(cfg).flow.max_steps == 300


def test_aborted_run_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("forced")

    monkeypatch.setattr(experiments, "integrate_gradient_flow", boom)
    code = cli.main(["--out", str(tmp_path), "train-sweep", "--seeds", "0:2", "--n", "4"])
    assert code == 1
    recs = read_runs(tmp_path)
    assert all(r["aborted"] and "forced" in r["error"] for r in recs)


def test_jobs_match_serial(tmp_path):
    base = dict(kind="train_sweep", n=5, widths=[[2, 2, 1]], seeds=[0, 1],
                flow={"max_steps": 100, "record_every": 10})
    serial = run_experiment(ExperimentConfig(**base, out=str(tmp_path / "s")))
    pooled = run_experiment(ExperimentConfig(**base, out=str(tmp_path / "p"), jobs=2))
    assert [r["theta"].tolist() for r in serial.records] == [r["theta"].tolist() for r in pooled.records]


def test_eigen_track_and_saddle_perturb(tmp_path):
    common = ["--target", "rosenbrock_mod", "--n", "5", "--widths", "2-1-1", "--max-steps", "2000",
              "--stiff-after", "200", "--gammas", "0.25,0.5"]
    assert cli.main(["--out", str(tmp_path / "e"), "eigen-track"] + common) == 0
    recs = read_runs(tmp_path / "e")
    assert [r["gamma"] for r in recs] == [0.25, 0.5]
    assert (tmp_path / "e" / "eigen_track.csv").exists()
    assert cli.main(["--out", str(tmp_path / "s"), "saddle-perturb", "--max-steps", "300"] + common[:-4]
                    + ["--gammas", "0.5"]) in (0, 1)
    assert len(read_runs(tmp_path / "s")) == 2


def test_channel_follow_without_channel(tmp_path):
    code = cli.main(["--out", str(tmp_path), "channel-follow", "--n", "4", "--widths", "2-1-1",
                     "--seeds", "0", "--max-steps", "20"])
    assert code == 0
    assert read_runs(tmp_path)[0]["followed"] is False


def test_toy_analytic_smoke(tmp_path):
    conf = tmp_path / "toy.json"
    conf.write_text(json.dumps({
        "w_grid": list(np.linspace(0.3, 4.0, 60)), "surface_gammas": [0.0, 2.0],
        "surface_alphas": [-0.5, 0.5], "seeds": [0], "toy_samples": 256, "toy_epochs": 2,
        "relax_steps": 50, "flow": {"max_steps": 200}}))
    assert cli.main(["--out", str(tmp_path), "--config", str(conf), "toy-analytic"]) == 0
    for name in ("w_sweep.csv", "gamma_alpha_surface.csv", "runs.jsonl", "summary.csv"):
        assert (tmp_path / name).exists()
    parts = [r["part"] for r in read_runs(tmp_path)]
    assert parts[:2] == ["w_sweep", "gamma_alpha_surface"] and "population_flow" in parts


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "chaninf.cli", "--help"], capture_output=True,
                         text=True, check=True)
    assert "train-sweep" in out.stdout and "toy-analytic" in out.stdout
