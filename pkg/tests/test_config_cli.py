import csv
import json
from dataclasses import replace

import pytest

from tvomega.cli import main, paired_summary
from tvomega.config import ConfigError, ExperimentConfig, presets
from tvomega.rl import LearningCurve


def tiny_config(tmp_path, **schedule):
    cfg = ExperimentConfig()
    sch = dict(kind="gaussian_walk", horizon=4, n_per_step=30)
    sch.update(schedule)
    cfg.schedule = replace(cfg.schedule, **sch)
    cfg.run = replace(cfg.run, seeds=(0, 1), protocols=("recent", "omega_weighted"), out=str(tmp_path / "out"),
                      test_size=50, omega_epochs=2)
    cfg.model = replace(cfg.model, hidden=(4,), epochs=1)
    cfg.omega = replace(cfg.omega, hidden=(8,), epochs_per_step=1)
    cfg.rl = replace(cfg.rl, episodes=15, burn_in=3, refresh_every=5, omega_epochs=1)
    path = tmp_path / "cfg.ini"
    cfg.save(path)
    return cfg, path


def run(*argv):
    return main([str(a) for a in argv])


# -- config ------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(presets()))
def test_presets_roundtrip(name):
    cfg = presets()[name].validate()
    back = ExperimentConfig.from_ini(cfg.to_ini())
    assert back == cfg and back.digest() == cfg.digest()


def test_shipped_config_files_match_presets():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name, cfg in presets().items():
        assert ExperimentConfig.load(root / f"{name}.ini") == cfg


def test_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[run]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[extra]\na = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[schedule]\nhorizon = ten\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[schedule]\nhorizon = 0\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[run]\nprotocols = recent, oracle\n").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[omega]\nclip = -1.0\n").validate()


def test_none_and_tuples_parse():
    cfg = ExperimentConfig.from_ini("[omega]\nclip = none\n[model]\nhidden = 32, 16\n[run]\nstop = none\n")
    assert cfg.omega.clip is None and cfg.model.hidden == (32, 16) and cfg.run.stop is None


# -- commands ----------------------------------------------------------------


def test_gen_is_deterministic(tmp_path):
    cfg, path = tiny_config(tmp_path)
    assert run("gen", "--config", path) == 0
    files = sorted((tmp_path / "out" / "streams").rglob("*.csv"))
    assert len(files) == 2 * 4
    first = {f: f.read_bytes() for f in files}
    with open(files[0]) as fh:
        assert len(list(csv.reader(fh))) == 1 + 30
    assert run("gen", "--config", path) == 0
    assert {f: f.read_bytes() for f in files} == first
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.digest() and manifest["commands"] == ["gen"]


def test_invalid_config_writes_nothing(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text(f"[schedule]\nhorizon = 0\n[run]\nout = {tmp_path / 'never'}\n")
    assert run("gen", "--config", path) == 1
    assert not (tmp_path / "never").exists()


def test_manifest_mismatch_needs_force(tmp_path):
    _, path = tiny_config(tmp_path)
    assert run("gen", "--config", path) == 0
    cfg = ExperimentConfig.load(path)
    cfg.schedule = replace(cfg.schedule, n_per_step=31)
    other = tmp_path / "other.ini"
    cfg.save(other)
    assert run("gen", "--config", other) == 1
    assert run("gen", "--config", other, "--force") == 0


def test_dry_run_writes_nothing(tmp_path, capsys):
    _, path = tiny_config(tmp_path)
    assert run("benchmark", "--config", path, "--dry-run") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 * 3 * 2 and lines[0] == "seed=0 t=1 protocol=recent"
    assert run("rl", "--config", path, "--dry-run") == 0
    assert not (tmp_path / "out").exists()


def test_exit_codes(tmp_path):
    assert run("gen", "--config", tmp_path / "missing.ini") == 2
    assert run("gen", "--config", "preset:nope") == 1
    assert run("nonsense", "--config", "preset:gaussian") == 1
    _, path = tiny_config(tmp_path)
    assert run("gen", "--config", path, "--jobs", "0") == 1
    assert run("validate", "--config", path) == 2
    assert run("plot", "--config", path) == 2


def test_benchmark_outputs(tmp_path, capsys):
    _, path = tiny_config(tmp_path)
    assert run("benchmark", "--config", path, "--seed", "1") == 0
    out = tmp_path / "out"
    rows = list(csv.DictReader(open(out / "runs.csv")))
    assert len(rows) == 3 * 2 and {r["seed"] for r in rows} == {"1"}
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert len(summary) == 3 * 2 and all(r["n_seeds"] == "1" for r in summary)
    assert (out / "accuracy.svg").exists()
    assert "recent\tmean_accuracy" in capsys.readouterr().out


def test_benchmark_summary_averages_seeds(tmp_path):
    _, path = tiny_config(tmp_path)
    assert run("benchmark", "--config", path, "--jobs", "2") == 0
    out = tmp_path / "out"
    runs = list(csv.DictReader(open(out / "runs.csv")))
    summary = list(csv.DictReader(open(out / "summary.csv")))
    for row in summary:
        accs = [float(r["accuracy"]) for r in runs if r["protocol"] == row["protocol"] and r["t"] == row["t"]]
        assert len(accs) == 2
        assert float(row["mean_accuracy"]) == pytest.approx(sum(accs) / 2)


def test_train_validate_plot(tmp_path):
    _, path = tiny_config(tmp_path, horizon=6)
    assert run("train-omega", "--config", path) == 0
    assert run("validate", "--config", path) == 0
    out = tmp_path / "out"
    for seed in (0, 1):
        rows = list(csv.DictReader(open(out / f"mmd_seed{seed}.csv")))
        assert len(rows) == 6 - 1
    svg = (out / "mmd_seed0.svg").read_bytes()
    assert run("plot", "--config", path) == 0
    assert (out / "mmd_seed0.svg").read_bytes() == svg


def test_rl_outputs(tmp_path, capsys):
    _, path = tiny_config(tmp_path)
    assert run("rl", "--config", path) == 0
    out = tmp_path / "out"
    for seed in (0, 1):
        rows = list(csv.DictReader(open(out / f"rl_curves_seed{seed}.csv")))
        assert {r["learner"] for r in rows} == {"unweighted", "weighted"} and len(rows) == 30
    assert "weighted wins" in capsys.readouterr().out
    assert (out / "rl_returns.svg").exists()


def test_rl_baseline_only(tmp_path):
    _, path = tiny_config(tmp_path)
    assert run("rl", "--config", path, "--baseline-only", "--seed", "0") == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "rl_curves_seed0.csv")))
    assert {r["learner"] for r in rows} == {"unweighted"}
    summary = list(csv.DictReader(open(tmp_path / "out" / "rl_summary.csv")))
    assert list(summary[0]) == ["seed", "unweighted"]


def curve(values):
    c = LearningCurve(0, True)
    c.eval_returns = list(values)
    return c


def test_paired_summary_statistics():
    results = {s: {"unweighted": curve([0, 0, 0, 1.0]), "weighted": curve([0, 0, 0, 1.0 + s])} for s in range(4)}
    rows, test = paired_summary(results)
    assert [r["difference"] for r in rows] == [0.0, 1.0, 2.0, 3.0]
    assert test["wins"] == 3 and test["mean_difference"] == 1.5
    same = {s: {"unweighted": curve([2.0]), "weighted": curve([2.0])} for s in range(3)}
    assert paired_summary(same)[1]["p_value"] == 1.0
