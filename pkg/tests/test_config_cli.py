import dataclasses
import os
import subprocess
import sys

import numpy as np
import pytest

from chemojko.cli import EXIT_CHECKS, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from chemojko.config import (ConfigError, RunConfig, config_field_names, config_to_text, parse_config,
                             parse_config_text, print_defaults)
from chemojko.driver import load_final_state, parse_manifest, read_step_csv, run

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


BUMPS = """[grid]
cells = 512
lengths = 2.0

[physics]
steps = 3

[scenario]
name = merging_bumps_1d
"""


# config


def test_round_trip_defaults():
    cfg = RunConfig()
    assert parse_config_text(config_to_text(cfg)) == cfg


def test_round_trip_with_scenario_params():
    cfg = RunConfig(dim=2, cells=(16, 12), lengths=(2.0, 1.5), mu=0.25, eps=1e-3, band=4, engine="entropic",
                    scenario="saturated_ball_2d").with_scenario_params(center=(0.9, 0.7))
    back = parse_config_text(config_to_text(cfg))
    assert back == cfg
    assert back.scenario_params["center"] == (0.9, 0.7)


@pytest.mark.parametrize("path", sorted(os.listdir(CONFIGS)))
def test_shipped_configs_parse(path):
    cfg = parse_config(os.path.join(CONFIGS, path))
    assert parse_config_text(config_to_text(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "[grid]\nalpha = 0\nbeta = 0\n",
    "[grid]\ncolour = blue\n",
    "[wibble]\nx = 1\n",
    "[physics]\ntau = -1\n",
    "[physics]\nsteps = many\n",
    "[solver]\nengine = lp\n[physics]\nmu = 0.5\n",
    "[scenario]\nname = nope\n",
    "[grid]\ncells = 8, 8\nlengths = 1, 1\n[solver]\nengine = quantile\n",
    "not an ini file",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_print_defaults_lists_every_field():
    text = print_defaults()
    keys = {line.split("=")[0].strip() for line in text.splitlines() if "=" in line}
    expected = set(config_field_names()) - {"scenario", "scenario_params"}
    assert expected <= keys
    assert parse_config_text(text) == RunConfig()


# cli


def test_cli_exit_ok_and_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["--config", write(tmp_path, BUMPS), "--out", str(out)])
    assert code == EXIT_OK
    files = sorted(os.listdir(out))
    assert [f for f in files if f.startswith("step_")] == [f"step_{n:05d}.csv" for n in (1, 2, 3)]
    assert "diagnostics.csv" in files and "manifest.ini" in files
    cfg, info = parse_manifest(out / "manifest.ini")
    assert cfg == parse_config_text(BUMPS) and info["status"] == "ok" and info["steps_completed"] == "3"
    assert "all checks pass" in capsys.readouterr().out


def test_cli_exit_checks_failed(tmp_path):
    text = BUMPS + "\n[checks]\npatch_bound = 1e-6\n"
    assert main(["--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == EXIT_CHECKS
    _, info = parse_manifest(tmp_path / "o" / "manifest.ini")
    assert info["status"] == "checks_failed" and "patch_intermediate_fraction" in info["failures"]


def test_cli_exit_solver_failure_keeps_manifest(tmp_path):
    text = BUMPS.replace("steps = 3", "steps = 2") + "\n[solver]\nengine = entropic\nmax_newton = 1\n"
    out = tmp_path / "o"
    assert main(["--config", write(tmp_path, text), "--out", str(out)]) == EXIT_SOLVER
    assert sorted(os.listdir(out)) == ["diagnostics.csv", "manifest.ini"]
    _, info = parse_manifest(out / "manifest.ini")
    assert info["status"] == "solver_failure" and info["failed_step"] == "1"
    # nothing computed: the final state is the initial density
    assert load_final_state(out).mass == pytest.approx(1.0)


def test_cli_exit_config_error(tmp_path):
    assert main(["--config", write(tmp_path, "[grid]\ncolour = blue\n")]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_cli_check_only_and_print_defaults(tmp_path, capsys):
    assert main(["--config", write(tmp_path, BUMPS), "--check-only"]) == EXIT_OK
    assert main(["--print-defaults"]) == EXIT_OK
    assert "[physics]" in capsys.readouterr().out


def test_step_csv_reloads_exactly(tmp_path):
    cfg = parse_config_text(BUMPS)
    res = run(cfg, tmp_path)
    last = res.trajectory.steps[-1]
    cols = read_step_csv(tmp_path / "step_00003.csv")
    assert np.array_equal(cols["rho"], last.rho_next.values)
    assert np.array_equal(cols["phi"], last.phi.values)
    assert np.array_equal(cols["pressure"], last.pressure_F.values)
    assert np.array_equal(load_final_state(tmp_path).values, last.rho_next.values)


def test_runs_are_deterministic(tmp_path):
    cfg = parse_config_text(BUMPS)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for name in ("diagnostics.csv", "step_00003.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stationary_run_writes_identical_densities(tmp_path):
    cfg = dataclasses.replace(parse_config(os.path.join(CONFIGS, "stationary.ini")), steps=3)
    res = run(cfg, tmp_path)
    assert res.passed
    rhos = [read_step_csv(tmp_path / f"step_{n:05d}.csv")["rho"] for n in (1, 2, 3)]
    assert np.array_equal(rhos[0], rhos[1]) and np.array_equal(rhos[1], rhos[2])
    assert np.array_equal(rhos[0], res.trajectory.rho_in.values)


def test_sweep_runs_every_config(tmp_path):
    for k in range(2):
        write(tmp_path, BUMPS.replace("steps = 3", f"steps = {k + 1}"), f"c{k}.ini")
    out = tmp_path / "sweep"
    assert main(["--sweep", str(tmp_path / "c*.ini"), "--out", str(out), "--workers", "1"]) == EXIT_OK
    assert sorted(os.listdir(out)) == ["c0", "c1"]
    assert len([f for f in os.listdir(out / "c1") if f.startswith("step_")]) == 2


def test_console_script_with_thread_cap(tmp_path):
    env = dict(os.environ, CHEMOJKO_NUM_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "chemojko.cli", "--config", write(tmp_path, BUMPS), "--out",
                           str(tmp_path / "o")], env=env, capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    env["CHEMOJKO_NUM_THREADS"] = "lots"
    proc = subprocess.run([sys.executable, "-m", "chemojko.cli", "--config", write(tmp_path, BUMPS), "--out",
                           str(tmp_path / "o2")], env=env, capture_output=True, text=True)
    assert proc.returncode != EXIT_OK
