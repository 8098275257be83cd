import csv
import json
import subprocess
import sys

import pytest

from invariance_lab.cdp import load_cdp, synth_random_cdp
from invariance_lab.cli import EXIT_INVALID, EXIT_USAGE, EXIT_VIOLATION, ExperimentConfig, main, run_pipeline
from invariance_lab.errors import LabError
from invariance_lab.estimation import CSV_HEADER


def write_config(path, **fields):
    path.write_text(json.dumps(fields))
    return str(path)


def test_run_reference_mdp_recovers_parents(tmp_path):
    assert main(["run", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["recovered_abstraction"] == [[0], [1], [2]]
    assert report["true_parents"] == [[0], [1], [2]]
    assert not report["icp_uninformative"]
    assert set(report["planning"]) == {"v_star_mu0", "invariant_gap", "mle_gap"}


def test_run_is_byte_identical(tmp_path):
    main(["run", "--seed", "3", "--out", str(tmp_path / "a")])
    main(["run", "--seed", "3", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_single_environment_flags_uninformative_icp():
    synth = {"d": 3, "domain_size": 3, "action_count": 2, "max_parents": 1, "seed": 4}
    cfg = ExperimentConfig(cdp={"synth": synth}, policies=[{"kind": "uniform", "id": "only"}], samples=300)
    report = run_pipeline(cfg, seed=0)
    assert report["icp_uninformative"]
    assert all(r["estimate"] == [] for r in report["icp"])
    assert report["recovered_abstraction"] == [[0, 1, 2]] * 3
    assert report["planning"]["invariant_gap"] >= -1e-8


def test_synth_round_trip(tmp_path):
    assert main(["synth", "--d", "2", "--domain-size", "3", "--actions", "2", "--max-parents", "1",
                 "--seed", "5", "--out", str(tmp_path)]) == 0
    assert load_cdp(tmp_path / "cdp.json") == synth_random_cdp(2, 3, 2, 1, 0.9, 5)


def test_collect_icp_estimate_plan_chain(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", samples=400)
    out = str(tmp_path / "o")
    assert main(["collect", "--config", cfg, "--out", out]) == 0
    data = str(tmp_path / "o" / "data.jsonl")
    assert main(["icp", "--config", cfg, "--data", data, "--out", out]) == 0
    icp = json.loads((tmp_path / "o" / "icp.json").read_text())
    assert len(icp["results"]) == 3
    assert main(["estimate", "--config", cfg, "--data", data, "--kind", "mle", "--out", out]) == 0
    assert json.loads((tmp_path / "o" / "model_mle.json").read_text())["kind"] == "mle"
    assert main(["plan", "--config", cfg, "--data", data, "--out", out]) == 0
    plan = json.loads((tmp_path / "o" / "plan_invariant.json").read_text())
    assert abs(plan["gap"]) < 1e-6  # one action: every policy is optimal


def test_convergence_csv_header(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", sample_grid=[20, 50], seeds=[0, 1])
    assert main(["fig2", "--config", cfg, "--out", str(tmp_path)]) == 0
    with open(tmp_path / "fig2.csv") as fh:
        rows = list(csv.reader(fh))
    assert ",".join(rows[0]) == "env_id,n,estimator,seed,estimate,truth,flag"
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + 3 * 2 * 2 * 2


def test_verify_sweep_seed7(tmp_path, capsys):
    assert main(["verify", "lemma1", "--seed", "7", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify_lemma1.json").read_text())
    assert rep["instances"] == 100 and rep["violations"] == []
    assert "0 violations" in capsys.readouterr().out


def test_loss_kernel_check(tmp_path, capsys):
    assert main(["loss-kernel-check", "--out", str(tmp_path)]) == 0
    assert "pass" in capsys.readouterr().out


def test_lab_out_overrides_out(tmp_path, monkeypatch):
    monkeypatch.setenv("LAB_OUT", str(tmp_path / "env"))
    main(["synth", "--out", str(tmp_path / "flag")])
    assert (tmp_path / "env" / "cdp.json").exists()
    assert not (tmp_path / "flag").exists()


def test_validation_failure_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", seeds=[])
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == EXIT_INVALID
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "LabError"
    cfg = write_config(tmp_path / "bad2.json", cdp={"path": str(tmp_path / "missing.json")})
    assert main(["run", "--config", cfg]) == EXIT_INVALID
    cfg = write_config(tmp_path / "bad3.json", colour="red")
    assert main(["run", "--config", cfg]) == EXIT_INVALID


def test_unknown_flag_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "invariance_lab.cli", "run", "--bogus"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == EXIT_USAGE
    assert "usage" in proc.stderr


def test_verification_violation_exit_code(tmp_path, monkeypatch):
    from invariance_lab import cli, sweeps

    def failing(seed=0, instances=1):
        rep = sweeps.SweepReport("lemma1", instances)
        rep.violations.append({"instance": 0})
        return rep

    monkeypatch.setitem(cli.SWEEPS, "lemma1", failing)
    assert main(["verify", "lemma1", "--out", str(tmp_path)]) == EXIT_VIOLATION


def test_config_invariants():
    with pytest.raises(LabError):
        ExperimentConfig(alpha=2.0)
