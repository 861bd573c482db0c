import json
import logging
import os

import pytest

import metacog.cli as cli
from metacog.report import read_csv

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(HERE, "..", "configs")
NOMINAL = os.path.join(CONFIGS, "lane_change_nominal.toml")
ADAPTIVE = os.path.join(CONFIGS, "lane_change_adaptive.toml")


def variant(tmp_path, src, old, new):
    with open(src, encoding="utf-8") as fh:
        text = fh.read()
    assert old in text
    path = tmp_path / "cfg.toml"
    path.write_text(text.replace(old, new))
    return str(path)


def test_simulate_writes_bundle(tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", NOMINAL, "--out", str(out), "--emit-plotscript"]) == cli.EXIT_OK
    names = sorted(os.listdir(out))
    assert names == ["config_echo.toml", "manifest.json", "plot_results.py", "trajectory.csv"]
    rows = read_csv(str(out / "trajectory.csv"))
    assert len(rows) == 14001 and rows[0]["plant"] == "nominal"
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "simulate" and "trajectory.csv" in man["files"]


def test_no_plotscript_by_default(tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", NOMINAL, "--out", str(out)]) == 0
    assert not (out / "plot_results.py").exists()


def test_missing_section_exit_2(tmp_path, capsys):
    path = variant(tmp_path, NOMINAL, "[vehicle]", "[ignored_vehicle]")
    assert cli.main(["simulate", path, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    path = variant(tmp_path, NOMINAL, "[sbo]\n", "[sbo]\nbogus = 1\n")
    assert cli.main(["simulate", path]) == cli.EXIT_CONFIG
    assert "[sbo].bogus" in capsys.readouterr().err


def test_spec_file_missing_exit_2(tmp_path):
    path = variant(tmp_path, NOMINAL, 'spec = "G[0,14](abs(x1 - r) < 1)"', 'spec_file = "nope.stl"')
    assert cli.main(["simulate", path]) == cli.EXIT_CONFIG


def test_seed_from_command_line(tmp_path):
    path = variant(tmp_path, NOMINAL, "seed = 0\n", "")
    assert cli.main(["simulate", path, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["simulate", path, "--seed", "2", "--out", str(tmp_path / "o")]) == cli.EXIT_OK
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 2


def test_numeric_failure_exit_3(tmp_path, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise ArithmeticError("synthetic")

    monkeypatch.setattr("metacog.orchestrator.collect_data", boom)
    assert cli.main(["end2end", NOMINAL, "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_oracle_robustness_passes(capsys):
    assert cli.main(["oracle", NOMINAL, "--subject", "robustness"]) == cli.EXIT_OK
    assert "max error 0" in capsys.readouterr().out


def test_oracle_breach_exit_1(monkeypatch):
    monkeypatch.setattr(cli, "GP_TOL", -1.0)
    assert cli.main(["oracle", NOMINAL, "--subject", "gp"]) == cli.EXIT_ORACLE


def test_learn_fitness_outputs(tmp_path):
    out = tmp_path / "fit"
    assert cli.main(["learn-fitness", NOMINAL, "--out", str(out)]) == 0
    for name in ("fitness_gp.txt", "base_gp_0.txt", "base_gp_2.txt", "fitness_samples.csv", "manifest.json"):
        assert (out / name).exists()
    rows = read_csv(str(out / "fitness_samples.csv"))
    assert all(float(r["fitness_var"]) >= 0 for r in rows)


@pytest.mark.slow
def test_budget_zero_keeps_theta(tmp_path, caplog):
    path = variant(tmp_path, ADAPTIVE, "budget = 20", "budget = 0")
    out = tmp_path / "o"
    with caplog.at_level(logging.WARNING):
        assert cli.main(["end2end", path, "--out", str(out)]) == 0
    assert "budget is 0" in caplog.text
    rows = read_csv(str(out / "adaptations.csv"))
    assert rows
    for r in rows:
        assert [r[f"old_q{j}"] for j in range(1, 5)] == [r[f"new_q{j}"] for j in range(1, 5)]
        assert r["old_r1"] == r["new_r1"]
