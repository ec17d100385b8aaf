import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from ncl_scopf.cli import BENCH_HEADER, InputError, RunConfig, main
from tests.helpers import triangle

CASE14_ORACLE = 8081.526257048006  # independent SLSQP solve, see tests/oracles/opf_slsqp.py


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_opf_case9(capsys):
    code, out, _ = run(capsys, "opf", "--case", "case9")
    doc = json.loads(out)
    assert code == 0 and doc["status"] == "optimal"
    assert doc["schema_version"] == 1
    assert doc["complementarity"] == {} and doc["certificate"] is None
    assert len(doc["buses"]["vm"]) == 9 and len(doc["gens"]["pg_mw"]) == 3


def test_opf_case14_matches_oracle(capsys):
    code, out, _ = run(capsys, "opf", "--case", "case14")
    assert code == 0
    assert abs(json.loads(out)["objective"] - CASE14_ORACLE) / CASE14_ORACLE <= 1e-4


def test_malformed_case_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.m"
    bad.write_text("mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 345 1 1.1 0.9;\n")
    code, _, err = run(capsys, "opf", "--case", str(bad))
    assert code == 2 and "line 2" in err


def test_missing_case_exit_2(capsys):
    assert run(capsys, "opf", "--case", "no_such_case")[0] == 2


@pytest.mark.parametrize("argv", [["--tol", "0"], ["--mu-min", "1e-5"], ["--jobs", "0"]])
def test_bad_config_exit_2(argv, capsys):
    assert run(capsys, "opf", "--case", "case9", *argv)[0] == 2


def test_runconfig_invariants():
    with pytest.raises(InputError):
        RunConfig(case="x", tol=1e-6, mu_min=1e-6)
    assert RunConfig(case="x").mu_min < RunConfig(case="x").tol


def test_scopf_case9_k1(capsys, tmp_path):
    out_path = tmp_path / "sol.json"
    code, _, _ = run(capsys, "scopf", "--case", "case9", "--K", "1", "--out", str(out_path))
    doc = json.loads(out_path.read_text())
    assert code == 0 and doc["status"] == "optimal"
    assert len(doc["contingencies"]) == 1
    assert doc["contingencies"][0]["agc_error"] <= 1e-5
    assert doc["certificate"]["verdict"] == "strong"
    assert list(doc["bench"]) == BENCH_HEADER and doc["bench"]["K"] == 1


def test_scopf_k0_equals_opf(capsys):
    opf = json.loads(run(capsys, "opf", "--case", "case9")[1])
    scopf = json.loads(run(capsys, "scopf", "--case", "case9", "--K", "0")[1])
    assert scopf["objective"] == opf["objective"]


def test_scopf_conflicting_contingency_exit_3(tmp_path, capsys):
    conts = tmp_path / "c.json"
    conts.write_text(json.dumps([{"kind": "branch", "id": 2}, {"kind": "branch", "id": 13}]))
    code, _, err = run(capsys, "scopf", "--case", "case30", "--contingencies", str(conts))
    assert code == 3 and "infeasible" in err


def test_scopf_reproducible(capsys, tmp_path):
    conts = tmp_path / "c.json"
    conts.write_text(json.dumps([{"kind": "branch", "id": 5}]))
    docs = []
    for _ in range(2):
        doc = json.loads(run(capsys, "scopf", "--case", "case9", "--contingencies", str(conts))[1])
        doc.pop("time_s")
        doc["bench"].pop("time_s")
        doc["bench"].pop("time_per_iter_s")
        docs.append(doc)
    assert docs[0] == docs[1]


def test_screen_zero_load(tmp_path, capsys):
    case = tmp_path / "flat.m"
    case.write_text(triangle(pd=0.0, qd=0.0, pmin=0.0))
    out = tmp_path / "screen.csv"
    code, _, _ = run(capsys, "screen", "--case", str(case), "--out", str(out))
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert code == 0 and len(rows) == 3
    assert all(r["status"] == "feasible" for r in rows)
    assert json.loads(out.with_suffix(".json").read_text())["records"]


def test_bench_case30_affine(capsys):
    code, out, _ = run(capsys, "bench", "--case", "case30", "--K", "1,2,4")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0
    assert rows[0][:6] == ["K", "nvar", "ncon", "iter", "obj", "time_s"]
    assert rows[0] == BENCH_HEADER
    K = np.array([int(r[0]) for r in rows[1:]])
    nvar = np.array([int(r[1]) for r in rows[1:]])
    assert K.tolist() == [1, 2, 4]
    assert np.all(np.diff(nvar) > 0)
    slope = (nvar[1] - nvar[0]) / (K[1] - K[0])
    assert nvar[2] == nvar[0] + slope * (K[2] - K[0])


def test_log_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NCL_LOG_DIR", str(tmp_path))
    assert run(capsys, "opf", "--case", "case9", "--verbose")[0] == 0
    outer = [json.loads(x) for x in (tmp_path / "case9-opf.outer.jsonl").read_text().splitlines()]
    inner = (tmp_path / "case9-opf.inner.jsonl").read_text().splitlines()
    assert set(outer[0]) == {"n", "rho", "r_inf", "t_inf", "inner_iters", "stationarity"}
    assert len(inner) >= outer[0]["inner_iters"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ncl_scopf", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("opf", "scopf", "screen", "bench"):
        assert name in res.stdout


def test_bench_without_verification_hits_marginal_outage(capsys):
    # branch 10 screens as marginal on case30 but has no feasible SCOPF
    code, out, _ = run(capsys, "bench", "--case", "case30", "--K", "1", "--no-verify")
    assert code == 3 and out.splitlines()[0].split(",") == BENCH_HEADER
