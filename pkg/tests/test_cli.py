import csv
import json
import math

import numpy as np
import pytest

from msplit import cli, solvers
from msplit.synthetic import make_quadratic_instance


def _write(path, text):
    path.write_text(text)
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_estimate_ct_desk(tmp_path):
    assert cli.main(["estimate", "--out", str(tmp_path)]) == 0
    payload = json.loads((tmp_path / "ledger.json").read_text())
    led = payload["ledger"]
    for key in ("alpha", "beta", "zeta", "rho", "lambda_min", "kappa_K", "zeta_tilde_mismatch", "rho_hat", "chi",
                "gamma_fbhf", "gamma_hat", "gamma_fdrf", "eps1", "eps2", "theta1", "theta_fbhf", "theta_fdrf"):
        assert led[key] is not None, key
    assert led["rho_hat"] == pytest.approx(1e-3, abs=1e-12)
    assert payload["mismatch_severity"] > 0


def test_estimate_quadratic_matched(tmp_path):
    assert cli.main(["estimate", "--problem", "quadratic_synthetic", "--out", str(tmp_path)]) == 0
    led = json.loads((tmp_path / "ledger.json").read_text())["ledger"]
    assert led["norm_mismatch"] == 0.0


def test_invalid_eta_bar_exit_2_no_output(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.toml", "[mismatch]\nkind = 'geometric'\nomega0 = 0.1\neta_bar = 1.5\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 2
    assert not out.exists()
    assert "mismatch.eta_bar" in capsys.readouterr().err


def test_unknown_key_and_missing_file(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.toml", "[solver]\nstep = 0.1\n")
    assert cli.main(["estimate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "solver.step" in capsys.readouterr().err
    assert cli.main(["estimate", "--config", str(tmp_path / "missing.toml")]) == 2


def test_inadmissible_gamma_rejected_before_run(tmp_path):
    cfg = _write(tmp_path / "g.toml", "problem = 'quadratic_synthetic'\n[solver]\ngamma = 50.0\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 2
    assert not out.exists()


@pytest.mark.slow
def test_run_ct_row_count_and_summary(tmp_path):
    cfg = _write(tmp_path / "c.toml", "max_iter = 2000\n[solver]\nrel_residual_tol = 0.0\nrecord_every = 10\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path), "--algorithm", "mmfbhf"]) == 0
    rows = _rows(tmp_path / "trace_mmfbhf.csv")
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert len(rows) - 1 == 2000 // 10 + 1
    assert [int(r[0]) for r in rows[1:4]] == [0, 10, 20] and rows[-1][0] == "1999"
    assert all(r[6] == "" for r in rows[1:])
    s = json.loads((tmp_path / "summary_mmfbhf.json").read_text())
    assert s["iterations"] == 2000
    assert s["rate_report"] is not None and s["fejer_report"] is not None
    assert s["final_metrics"]["roi_snr_db"] is not None
    assert s["ledger"]["rho_hat"] == pytest.approx(1e-3, abs=1e-12)


def test_run_quadratic_both_byte_identical(tmp_path):
    args = ["run", "--problem", "quadratic_synthetic", "--algorithm", "both", "--no-timing", "--max-iter", "400"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for alg in ("mmfbhf", "mmfdrf"):
        a = (tmp_path / "a" / f"trace_{alg}.csv").read_bytes()
        assert a == (tmp_path / "b" / f"trace_{alg}.csv").read_bytes()
        rows = _rows(tmp_path / "a" / f"trace_{alg}.csv")
        assert all(r[1] == "0" for r in rows[1:])
        assert rows[1][6] != ""
        s = json.loads((tmp_path / "a" / f"summary_{alg}.json").read_text())
        assert s["gap_bound_report"]["satisfied"]
        assert s["rate_reference"] == "reference"


def test_custom_file_problem(tmp_path):
    inst = make_quadratic_instance(8, 4, 0.02)
    path = tmp_path / "inst.npz"
    np.savez(path, L=inst.L, K=inst.K, c=inst.c, Q=inst.Q, q=inst.q, S=inst.S, alpha=inst.alpha,
             rho=inst.rho, lo=inst.lo, hi=inst.hi)
    cfg = _write(tmp_path / "c.toml", f"problem = 'custom_file'\n[custom]\npath = '{path}'\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--max-iter", "3000"]) == 0
    s = json.loads((tmp_path / "o" / "summary_mmfbhf.json").read_text())
    assert s["converged"]
    assert cli.main(["run", "--problem", "custom_file", "--out", str(tmp_path / "p")]) == 2


def test_compare_merges_and_guards(tmp_path):
    a = _write(tmp_path / "a.toml", "problem = 'quadratic_synthetic'\nno_timing = true\nmax_iter = 300\n")
    b = _write(tmp_path / "b.toml", "problem = 'quadratic_synthetic'\nno_timing = true\nmax_iter = 300\n"
                                    "algorithm = 'mmfdrf'\n[mismatch]\nkind = 'geometric'\nomega0 = 0.01\n"
                                    "eta_bar = 0.9\n")
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", a, "--config", b, "--out", str(out)]) == 0
    rows = _rows(out / "compare.csv")
    assert rows[0][:2] == ["run_id", "algorithm"]
    ids = {r[0] for r in rows[1:]}
    assert ids == {"0_mmfbhf", "1_mmfdrf"}
    summary = json.loads((out / "compare_summary.json").read_text())
    assert len(summary["runs"]) == 2
    other = _write(tmp_path / "c.toml", "problem = 'quadratic_synthetic'\nseed = 5\n")
    assert cli.main(["compare", "--config", a, "--config", other, "--out", str(tmp_path / "x")]) == 2


def test_compare_identical_configs_identical_metrics(tmp_path, monkeypatch):
    monkeypatch.setenv("MSPLIT_THREADS", "1")
    a = _write(tmp_path / "a.toml", "problem = 'quadratic_synthetic'\nno_timing = true\nmax_iter = 200\n")
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", a, "--config", a, "--out", str(out)]) == 0
    r0 = _rows(out / "trace_0_mmfbhf.csv")
    r1 = _rows(out / "trace_1_mmfbhf.csv")
    assert r0 == r1


def test_compare_needs_two_runs(tmp_path):
    assert cli.main(["compare", "--problem", "quadratic_synthetic", "--out", str(tmp_path)]) == 2


def test_nan_exit_3_with_partial_csv(tmp_path, monkeypatch):
    real = solvers.mmfbhf_step

    def poisoned(z, gamma, K_n, spec):
        z_next, x = real(z, gamma, K_n, spec)
        poisoned.calls += 1
        if poisoned.calls > 25:
            z_next = z_next * math.nan
        return z_next, x

    poisoned.calls = 0
    monkeypatch.setattr(solvers, "mmfbhf_step", poisoned)
    code = cli.main(["run", "--problem", "quadratic_synthetic", "--out", str(tmp_path), "--max-iter", "100"])
    assert code == 3
    rows = _rows(tmp_path / "trace_mmfbhf.csv")
    assert [r[0] for r in rows[1:]] == ["0", "10", "20"]


def test_phantom_export(tmp_path):
    assert cli.main(["phantom", "--out", str(tmp_path), "--seed", "3"]) == 0
    img = np.fromfile(tmp_path / "phantom.bin", dtype="<f8")
    header = json.loads((tmp_path / "phantom.json").read_text())
    assert header["shape"] == [32, 32] and header["kind"] == "checker"
    assert img.size == 1024 and img.max() <= 900.0
    sino = json.loads((tmp_path / "sinogram.json").read_text())
    assert sino["shape"] == [24, 48] and sino["sigma"] == 200.0
    assert cli.main(["phantom", "--problem", "quadratic_synthetic", "--out", str(tmp_path / "q")]) == 2


def test_problem_hash_ignores_mismatch_and_solver():
    a = cli.RunConfig()
    b = cli.RunConfig.model_validate({"mismatch": {"kind": "geometric", "omega0": 0.1, "eta_bar": 0.5},
                                      "solver": {"record_every": 3}, "algorithm": "mmfdrf"})
    c = cli.RunConfig.model_validate({"penalties": {"weight": 100.0}})
    assert a.problem_hash() == b.problem_hash() != c.problem_hash()
