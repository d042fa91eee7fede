import json
import re
import subprocess
import sys

import numpy as np
import pytest

from attractor_fcm.cli import UsageError, main, parse_seeds, read_weights
from attractor_fcm.core import DynamicsConfig
from attractor_fcm.harness import read_denoising_csv, read_grid_csv, read_history_csv
from attractor_fcm.scenarios import ScenarioSpec, load_scenario, save_scenario


def afcm(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def oscillator_file(tmp_path):
    # strong negative self-loop: the forward map flips around its root,
    # so a single Newton step at eps=1e-12 fails and the fallback oscillates
    spec = ScenarioSpec(
        name="osc",
        n=1,
        groups=(("x", 0, 1),),
        w_initial=np.array([[-10.0]]),
        h0=[0.3],
        h_target=[0.2],
        dynamics=DynamicsConfig(alpha=1.0),
        allow_self_loops=True,
    )
    path = tmp_path / "osc.json"
    save_scenario(spec, path)
    return path


def test_parse_seeds():
    assert parse_seeds("1..10") == list(range(1, 11))
    assert parse_seeds("1..3,7") == [1, 2, 3, 7]
    assert parse_seeds("5") == [5]
    assert parse_seeds("1,,2") == [1, 2]
    for bad in ["", ",", "a", "3..1", "1..", "1.5"]:
        with pytest.raises(UsageError):
            parse_seeds(bad)


# -- gen --------------------------------------------------------------------


def test_gen_s3_is_contractive(tmp_path, capsys):
    assert afcm("gen", "S3", "--seed", 7, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "contractive=true" in out
    assert (tmp_path / "S3-seed7.json").exists()


def test_gen_q1_size(tmp_path):
    assert afcm("gen", "Q1", "--seed", 1, "--out", tmp_path) == 0
    assert load_scenario(tmp_path / "Q1-seed1.json").n == 50
    assert json.loads((tmp_path / "Q1-seed1.json").read_text())["n"] == 50


def test_gen_is_byte_identical_and_guarded(tmp_path, capsys):
    path = tmp_path / "S1-seed3.json"
    assert afcm("gen", "S1", "--seed", 3, "--out", tmp_path) == 0
    first = path.read_bytes()
    assert afcm("gen", "S1", "--seed", 3, "--out", tmp_path) == 4
    assert "refusing to overwrite" in capsys.readouterr().err
    assert afcm("gen", "S1", "--seed", 3, "--out", tmp_path, "--force") == 0
    assert path.read_bytes() == first


def test_gen_creates_nested_out_dir(tmp_path):
    out = tmp_path / "a" / "b"
    assert afcm("gen", "S2", "--out", out) == 0
    assert (out / "S2-seed0.json").exists()


# -- run --------------------------------------------------------------------


def test_run_zero_epochs_writes_header_only(tmp_path):
    afcm("run", "S1", "--seed", 1, "--epochs", 0, "--out", tmp_path)
    assert (tmp_path / "history.csv").read_text() == "epoch,error_norm,reward,lambda_a,accepted,grad_norm\n"
    assert read_history_csv(tmp_path / "history.csv") == []


def test_run_summary_matches_last_accepted_row(tmp_path, capsys):
    assert afcm("run", "S1", "--seed", 2, "--epochs", 40, "--out", tmp_path) == 0
    line = capsys.readouterr().out
    printed = float(re.search(r"final_error=(\S+)", line).group(1))
    rows = [r for r in read_history_csv(tmp_path / "history.csv") if r["accepted"]]
    assert rows and printed == rows[-1]["error_norm"]
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["final_error"] == printed and result["converged"] is True
    w = read_weights(tmp_path / "weights.csv")
    assert w.shape == (20, 20)


def test_run_echoes_effective_config(tmp_path):
    afcm("run", "S2", "--epochs", 3, "--eta", 0.02, "--alpha", 0.7, "--no-anchor", "--epsilon", 1e-9, "--out", tmp_path)
    cfg = json.loads((tmp_path / "config.json").read_text())["learner_config"]
    assert cfg["eta"] == 0.02 and cfg["epochs"] == 3
    assert cfg["dynamics"]["alpha"] == 0.7 and cfg["dynamics"]["use_anchor"] is False
    assert cfg["newton"]["epsilon"] == 1e-9


def test_run_newton_failure_exits_nonconverged(tmp_path, oscillator_file, capsys):
    code = afcm(
        "run", oscillator_file, "--epochs", 1, "--newton-iters", 1, "--epsilon", 1e-12, "--out", tmp_path / "o"
    )
    assert code == 3
    assert "not converged" in capsys.readouterr().out
    rows = read_history_csv(tmp_path / "o" / "history.csv")
    assert len(rows) == 1 and not rows[0]["accepted"]


def test_run_bad_scenario_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "attractor-fcm-scenario/1"}')
    assert afcm("run", bad, "--out", tmp_path / "o") == 4
    assert afcm("run", tmp_path / "missing.json", "--out", tmp_path / "o2") == 4


# -- bench / ablate / denoise ----------------------------------------------


def test_bench_counts(tmp_path, capsys):
    code = afcm("bench", "--scenarios", "S1,S2,S3,S4", "--seeds", "1..10", "--epochs", 3, "--out", tmp_path)
    assert code == 0
    assert "160 runs, 16 rows" in capsys.readouterr().out
    assert len(read_grid_csv(tmp_path / "grid.csv")) == 160
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["rows"]) == 16 and summary["complete"] is True


def test_bench_is_deterministic_and_writes_trajectories(tmp_path):
    args = ["bench", "--scenarios", "S3", "--learners", "jgd,gd", "--seeds", "1..2", "--epochs", 4, "--trajectories"]
    assert afcm(*args, "--out", tmp_path / "a", "--jobs", 1) == 0
    assert afcm(*args, "--out", tmp_path / "b", "--jobs", 2) == 0
    for name in ["grid.csv", "summary.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(list((tmp_path / "a" / "trajectories").glob("*.csv"))) == 4


def test_ablate_full_grid_rows(tmp_path, capsys):
    assert afcm("ablate", "--full-grid", "--seeds", 1, "--epochs", 1, "--out", tmp_path) == 0
    assert "91 runs, 91 rows" in capsys.readouterr().out
    assert len(json.loads((tmp_path / "summary.json").read_text())["rows"]) == 91


def test_ablate_unknown_config(tmp_path):
    assert afcm("ablate", "--configs", "Nothing", "--out", tmp_path) == 1


def test_denoise_writes_traces(tmp_path):
    assert afcm("denoise", "--seed", 7, "--levels", "0,0.1", "--seeds", "1..2", "--steps", 20, "--out", tmp_path) == 0
    rows = read_denoising_csv(tmp_path / "traces.csv")
    assert len(rows) == 2 * 2 * 21
    assert all(r["distance"] == 0.0 for r in rows if r["noise_level"] == 0.0)
    assert json.loads((tmp_path / "summary.json").read_text())["all_bounded"] is True


def test_denoise_refuses_non_contractive(tmp_path, capsys):
    assert afcm("denoise", "S1", "--out", tmp_path) == 3
    assert "bound" in capsys.readouterr().err


# -- check ------------------------------------------------------------------


def test_check_zero_weights(tmp_path, capsys):
    path = tmp_path / "w.csv"
    path.write_text("0,0,0\n0,0,0\n0,0,0\n")
    assert afcm("check", path, "--steepness", 1) == 0
    assert "bound 0.25\n" in capsys.readouterr().out


def test_check_non_contractive(tmp_path):
    path = tmp_path / "w.txt"
    path.write_text("0 5\n5 0\n")
    assert afcm("check", path) == 3


def test_check_scenario_file(tmp_path, capsys):
    afcm("gen", "S3", "--seed", 7, "--out", tmp_path)
    capsys.readouterr()
    assert afcm("check", tmp_path / "S3-seed7.json") == 0
    assert "contractive true" in capsys.readouterr().out


def test_check_malformed_matrix(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("0,1\n0\n")
    assert afcm("check", path) == 4
    path.write_text("0,x\n1,0\n")
    assert afcm("check", path) == 4


# -- usage ------------------------------------------------------------------


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        afcm("frobnicate")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        afcm("gen", "S9")
    assert exc.value.code == 1
    assert afcm("bench", "--seeds", "x", "--out", tmp_path) == 1
    assert afcm("bench", "--seed", 1, "--seeds", "1..2", "--out", tmp_path) == 1
    assert afcm("bench", "--learners", "adam", "--out", tmp_path) == 1


def test_quiet_suppresses_stdout(tmp_path, capsys):
    assert afcm("-q", "gen", "S3", "--out", tmp_path) == 0
    assert capsys.readouterr().out == ""


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "attractor_fcm", "gen", "S3", "--seed", "7", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and "contractive=true" in proc.stdout
