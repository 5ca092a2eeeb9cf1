import json

import numpy as np
import pytest

from fmoheom import cli, validation
from fmoheom.cli import RunConfig, main
from fmoheom.data import (
    identity_layout,
    read_measures,
    read_trajectory,
    sweep_manifest,
    write_manifest,
)
from fmoheom.model import UNITS
from fmoheom.validation import CheckResult

FAST = ["--t-max", "40", "-L", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_writes_files_and_summary(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--model", "fmo8", "--lambda", 40, "--gamma", 25, "--temp", 310,
                       "--site", 1, "--out", tmp_path, *FAST)
    assert code == 0
    rundir = tmp_path / "lam40_gam25_T310"
    traj = read_trajectory(rundir / "trajectory.dat")
    assert len(traj) == 41
    assert read_measures(rundir / "measures.csv").columns().keys() >= {"E", "L_rho", "C_1_2"}
    assert "Lambda: 2.19" in out
    assert "final populations" in out and "max E" in out and "final L_rho" in out
    assert "ln(gamma/lambda)" in out and "ln(gamma*beta)" in out
    assert RunConfig.from_text((rundir / "config.txt").read_text()).gamma == 25.0


def test_simulate_unitary_limit_flag(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--lambda", 0, "--dt", 0.1, "--out", tmp_path, *FAST)
    assert code == 0
    assert "unitary limit" in out


def test_unitary_run_with_coarse_step_is_rejected_by_measures(tmp_path, capsys):
    # RK4 on the Liouvillian slowly pushes a pure state out of the positive cone
    code, out, err = run(capsys, "simulate", "--lambda", 0, "--out", tmp_path, *FAST)
    assert code == 1
    assert "unitary limit" in out and "reduce dt" in err
    assert (tmp_path / "lam0_gam100_T310" / "trajectory.dat").exists()


def test_invalid_site(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--model", "fmo8", "--site", 9, "--out", tmp_path, *FAST)
    assert code == 1
    assert "site 9" in err


def test_bad_flags_are_usage_errors(capsys):
    assert run(capsys, "simulate", "--lambda", "forty")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1


def test_divergence_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--dt", 40, "--t-max", 200000, "--stride", 40, "-L", 2,
                       "--out", tmp_path)
    assert code == 2
    assert "diverged" in err


def test_config_file_and_flag_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    conf = tmp_path / "run.conf"
    conf.write_text("lam = 70  # cm^-1\ngamma = 50\ntemperature = 77\nt_max = 20\ndepth = 2\n")
    args = cli.build_parser().parse_args(["simulate", "--config", str(conf), "--gamma", "75"])
    cfg = cli.resolve_config(args)
    assert (cfg.lam, cfg.gamma, cfg.temperature, cfg.t_max, cfg.workers) == (70.0, 75.0, 77.0, 20.0, 3)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_file_errors(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("lam = forty\n")
    assert run(capsys, "simulate", "--config", conf)[0] == 1
    conf.write_text("colour = blue\n")
    assert run(capsys, "simulate", "--config", conf)[0] == 1
    assert run(capsys, "simulate", "--config", tmp_path / "missing.conf")[0] == 1


def test_converge_decoupled_single_row(tmp_path, capsys):
    code, out, _ = run(capsys, "converge", "--lambda", 0, "--dt", 0.1, "--t-max", 50, "-L", 1, "--out", tmp_path)
    assert code == 0
    table = out.split("L\tK\tmax_population_delta\n")[1].split("converged")[0].strip().splitlines()
    assert table == ["2\t0\t0"]


def test_converge_budget_exhausted(tmp_path, capsys):
    code, out, _ = run(capsys, "converge", "--lambda", 160, "--t-max", 100, "-L", 1, "--tol", 1e-9,
                       "--max-depth", 3, "--out", tmp_path)
    assert code == 3
    rows = out.split("max_population_delta\n")[1].splitlines()[:2]
    assert [r.split("\t")[:2] for r in rows] == [["2", "0"], ["3", "0"]]
    assert "last delta" in out


def write_sweep_manifest(path, triples):
    lams = sorted({t[0] for t in triples})
    gams = sorted({t[1] for t in triples})
    temps = sorted({t[2] for t in triples})
    write_manifest(sweep_manifest(lams, gams, temps, subset=triples), path)


def read_aggregate(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def test_sweep_single_point(tmp_path, capsys):
    write_sweep_manifest(tmp_path / "m.txt", [(40.0, 100.0, 310.0)])
    code, out, _ = run(capsys, "sweep", tmp_path / "m.txt", "--out", tmp_path / "sw", "--t-max", 2000,
                       "--stride", 10, "-L", 2)
    assert code == 0
    header, rows = read_aggregate(tmp_path / "sw" / "aggregate.csv")
    assert len(rows) == 1 and rows[0][0] == "lam40_gam100_T310"
    for t in ("0.1", "0.5", "1", "2"):
        assert f"E_{t}ps" in header and f"L_rho_{t}ps" in header
    assert {"lambda", "gamma", "T", "ln_gamma_over_lambda", "ln_gamma_beta", "ln_Lambda"} <= set(header)
    assert (tmp_path / "sw" / "manifest.txt").exists()
    assert (tmp_path / "sw" / "runs" / "lam40_gam100_T310" / "trajectory.dat").exists()


def test_sweep_isolates_failures_and_is_worker_independent(tmp_path, capsys):
    pole_t = 100.0 / (2 * np.pi * UNITS.k_B)  # beta gamma = 2 pi
    triples = [(40.0, 100.0, 310.0), (40.0, 100.0, pole_t), (10.0, 100.0, 310.0)]
    write_sweep_manifest(tmp_path / "m.txt", triples)
    outputs = []
    for workers in (1, 2):
        out_dir = tmp_path / f"w{workers}"
        code, out, _ = run(capsys, "sweep", tmp_path / "m.txt", "--out", out_dir, "--t-max", 100, "-L", 2,
                           "--workers", workers)
        assert code == 0
        header, rows = read_aggregate(out_dir / "aggregate.csv")
        assert [r[0] for r in rows] == ["lam40_gam100_T310", "lam10_gam100_T310"]
        assert "DegenerateParametersError" in (out_dir / "failures.txt").read_text()
        assert "2 of 3 runs succeeded" in out
        outputs.append((out_dir / "aggregate.csv").read_text())
    assert outputs[0] == outputs[1]


def test_sweep_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("not a manifest\n")
    assert run(capsys, "sweep", tmp_path / "m.txt", "--out", tmp_path / "sw")[0] == 1


@pytest.fixture
def simulated(tmp_path, capsys):
    run(capsys, "simulate", "--out", tmp_path, "--t-max", 100, "-L", 2)
    return tmp_path / "lam40_gam100_T310"


def test_measure_matches_simulate(simulated, capsys):
    code, _, _ = run(capsys, "measure", simulated / "trajectory.dat", "--out", simulated / "again.csv")
    assert code == 0
    assert (simulated / "again.csv").read_text() == (simulated / "measures.csv").read_text()


def test_measure_pairs(simulated, capsys):
    code, _, _ = run(capsys, "measure", simulated / "trajectory.dat", "--pairs", "3,4", "3,7", "2,3",
                     "--out", simulated / "p.csv")
    assert code == 0
    assert list(read_measures(simulated / "p.csv").concurrences) == [(3, 4), (3, 7), (2, 3)]
    assert run(capsys, "measure", simulated / "trajectory.dat", "--pairs", "3,3")[0] == 1
    assert run(capsys, "measure", simulated / "trajectory.dat", "--pairs", "3,9")[0] == 1


def test_measure_snapshot(simulated, capsys):
    code, out, _ = run(capsys, "measure", simulated / "trajectory.dat", "--snapshot", 100, "--threshold", 0.005,
                       "--out", simulated / "s.csv")
    assert code == 0
    table = out.split("# |rho_nk| at t = 100 fs")[1].strip().splitlines()[1:]
    assert len(table) == 9
    assert "." in out


def test_measure_external_layout(simulated, capsys):
    layout = identity_layout(8)
    path = simulated / "layout.json"
    path.write_text(json.dumps({"n_sites": 8, "columns": layout.columns, "header_lines": 1}))
    code, _, _ = run(capsys, "measure", simulated / "trajectory.dat", "--layout", path,
                     "--out", simulated / "ext.csv")
    assert code == 0
    a = read_measures(simulated / "ext.csv").columns()
    b = read_measures(simulated / "measures.csv").columns()
    for name in b:
        assert np.array_equal(a[name], b[name])


def test_measure_checks_hamiltonian(simulated, tmp_path, capsys):
    assert run(capsys, "measure", simulated / "trajectory.dat", "--model", "fmo8",
               "--out", tmp_path / "ok.csv")[0] == 0
    other = tmp_path / "dimer.txt"
    other.write_text("2 0\n0 50\n50 100\n")
    code, _, err = run(capsys, "measure", simulated / "trajectory.dat", "--model", other)
    assert code == 1 and "Hamiltonian" in err


def test_measure_input_errors(tmp_path, capsys):
    assert run(capsys, "measure", tmp_path / "nope.dat")[0] == 1
    (tmp_path / "bad.dat").write_text("# fmoheom-trajectory\n# format_version 9\n")
    assert run(capsys, "measure", tmp_path / "bad.dat")[0] == 1


def test_manifest_command(tmp_path, capsys):
    code, out, _ = run(capsys, "manifest", tmp_path / "m.txt")
    assert code == 0 and "9000 runs" in out
    (tmp_path / "subset.txt").write_text("10 25 30\n40, 50, 310  # comment\n")
    code, out, _ = run(capsys, "manifest", tmp_path / "s.txt", "--subset", tmp_path / "subset.txt")
    assert code == 0 and "2 runs" in out
    (tmp_path / "dup.txt").write_text("10 25 30\n10 25 30\n")
    assert run(capsys, "manifest", tmp_path / "d.txt", "--subset", tmp_path / "dup.txt")[0] == 1


def test_validate_cheap_checks(capsys):
    code, out, _ = run(capsys, "validate", "--only", "average_gap", "coherence_limits")
    assert code == 0
    assert "[PASS] average_gap: g = 157.17" in out
    assert "L(I/8) = 1," in out and "L(J/8) = 8," in out and "L(|1><1|) = 0.125" in out


def test_validate_failure_exit_code(capsys, monkeypatch):
    monkeypatch.setitem(validation.CHECKS, "average_gap", lambda: (False, "forced"))
    code, out, _ = run(capsys, "validate", "--only", "average_gap")
    assert code == 4
    assert "FAILED: average_gap" in out


def test_validate_unknown_check(capsys):
    code, _, err = run(capsys, "validate", "--only", "nonsense")
    assert code == 1 and "unknown checks" in err


def test_check_result_line():
    assert CheckResult("x", True, "fine", 1.25).line() == "[PASS] x: fine (1.2 s)"
