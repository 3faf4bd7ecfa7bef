import csv
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from mlkrig import bench
from mlkrig.cli import main
from mlkrig.field_synthesis import sample_field, sample_points
from mlkrig.index_sets import build_index_set
from mlkrig.kernels import KernelSpec
from mlkrig.multilevel_basis import build_basis
from mlkrig.partition_tree import build_tree
from mlkrig.pipeline import (ConfigError, read_obs, run_pipeline, validate_config, write_csv, write_obs)
from mlkrig.prediction import solve_gamma

MINIMAL = {
    "shape": "cube", "N": 200, "d": 2, "seed": 3,
    "kernel": {"family": "matern", "nu": 1.5, "rho": 0.4},
    "index_set": {"kind": "TD", "w": 1},
    "tau": 2.0, "targets": 20, "estimate": True, "optimizer": {"maxfev": 40},
}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config and pipeline


def test_minimal_pipeline_fast_and_complete(tmp_path):
    t0 = time.perf_counter()
    man = run_pipeline(MINIMAL, tmp_path)
    assert time.perf_counter() - t0 < 10.0
    assert set(man["artifacts"]) == {"obs.csv", "tree.json", "basis.bin", "cw.mlks", "assemble.json",
                                     "fit.json", "pred.csv", "pred.json"}
    rows = read_rows(tmp_path / "pred.csv")
    assert rows[0] == ["x0", "x1", "z_hat", "mse"] and len(rows) == 21
    assert all(float(r[3]) >= -1e-10 for r in rows[1:])


def test_pipeline_rerun_identical_hashes(tmp_path):
    a = run_pipeline(MINIMAL, tmp_path / "a")
    b = run_pipeline(MINIMAL, tmp_path / "b")
    assert a["artifacts"] == b["artifacts"]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


@pytest.mark.parametrize("path,mutate", [
    ("N", lambda c: c.pop("N")),
    ("kernel.rho", lambda c: c["kernel"].pop("rho")),
    ("kernel.nu", lambda c: c["kernel"].update(nu=-1.0)),
    ("index_set.kind", lambda c: c["index_set"].update(kind="XX")),
    ("tau", lambda c: c.update(tau="wide")),
    ("eps", lambda c: c.update(eps=2.0)),
    ("tree.rule", lambda c: c.update(tree={"rule": "octree"})),
])
def test_config_errors_name_the_field(path, mutate):
    cfg = json.loads(json.dumps(MINIMAL))
    mutate(cfg)
    with pytest.raises(ConfigError) as exc:
        validate_config(cfg)
    assert exc.value.path == path


def test_validate_normalizes():
    c = validate_config({**MINIMAL, "tau": "inf", "kernel": {"family": "matern", "nu": 1, "rho": 2}})
    assert c["tau"] == math.inf and isinstance(c["kernel"]["nu"], float)
    assert c["n"] == -1 and c["tree"]["rule"] == "kD"


def test_csv_roundtrip_full_precision(tmp_path):
    X = np.random.default_rng(0).standard_normal((7, 3))
    Z = np.random.default_rng(1).standard_normal(7)
    write_obs(tmp_path / "o.csv", X, Z)
    X2, Z2 = read_obs(tmp_path / "o.csv")
    assert np.array_equal(X, X2) and np.array_equal(Z, Z2)
    assert (tmp_path / "o.csv").read_bytes().count(b"\r\n") == 8
    write_csv(tmp_path / "q.csv", ["a", "b"], [["x,y", None]])
    assert read_rows(tmp_path / "q.csv")[1] == ["x,y", ""]


# ---------------------------------------------------------------- command line


def cli(*args):
    return main([str(a) for a in args])


def test_cli_end_to_end(tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    assert cli("--seed", 2, "gen", "--n", 150, "--d", 2, "--nu", 1.5, "--rho", 0.4, "--out", obs) == 0
    X, Z = read_obs(obs)
    assert X.shape == (150, 2) and Z.shape == (150,)
    assert cli("indexset", "--kind", "TD", "--d", 3, "--w", 4) == 0
    assert capsys.readouterr().out.split()[0] == "35"
    assert cli("tree", "--data", obs, "--n0", 12, "--stats") == 0
    assert json.loads(capsys.readouterr().out)["t"] >= 1
    assert cli("basis", "--data", obs, "--w", 1, "--out", tmp_path / "b.bin") == 0
    capsys.readouterr()
    assert cli("assemble", "--data", obs, "--w", 1, "--tau", "0.5", "--out", tmp_path / "c.mlks",
               "--mtx", tmp_path / "c.mtx") == 0
    assert 0 < json.loads(capsys.readouterr().out)["density"] <= 1
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**MINIMAL, "N": 150}))
    assert cli("estimate", "--config", cfg, "--data", obs, "--out", tmp_path / "fit.json") == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert all(v > 0 for v in fit["fit"]["theta_hat"])
    write_obs(tmp_path / "t.csv", sample_points("cube", 5, 2, 9))
    assert cli("predict", "--fit", tmp_path / "fit.json", "--data", obs, "--targets", tmp_path / "t.csv",
               "--out", tmp_path / "pred.csv") == 0
    assert read_rows(tmp_path / "pred.csv")[0] == ["x0", "x1", "z_hat", "mse"]
    assert cli("bounds", "--config", cfg, "--out", tmp_path / "bounds.json") == 0
    assert "regime" in json.loads((tmp_path / "bounds.json").read_text())


def test_cli_run_deterministic_single_thread(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(MINIMAL))
    for sub in ("a", "b"):
        assert cli("--threads", 1, "--out-dir", tmp_path / sub, "run", "--config", cfg) == 0
    for name in ("manifest.json", "pred.csv", "fit.json", "cw.mlks"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    bad = json.loads(json.dumps(MINIMAL))
    del bad["kernel"]["rho"]
    cfg.write_text(json.dumps(bad))
    assert cli("run", "--config", cfg) == 2
    assert "kernel.rho" in capsys.readouterr().err
    assert cli("run", "--config", tmp_path / "missing.json") == 2


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    # quadratic trend on the sphere: x^2 + y^2 + z^2 = 1 makes M rank deficient
    obs = tmp_path / "s.csv"
    write_obs(obs, sample_points("sphere", 100, 3, 0), np.zeros(100))
    assert cli("basis", "--data", obs, "--w", 2, "--out", tmp_path / "b.bin") == 3
    assert "numerical failure" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "mlkrig.cli", "indexset", "--kind", "HC", "--d", "50", "--w", "4"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.split()[0] == "1376"


# ---------------------------------------------------------------- benches


def test_bench_condition(tmp_path):
    cfg = {"d": 5, "N": 600, "shape": "cube", "kernel": {"nu": 1.0, "rho": 10.0},
           "grid": [{"kind": "TD", "w": 0}, {"kind": "TD", "w": 1}, {"kind": "TD", "w": 2}, {"kind": "HC", "w": 3}]}
    out = tmp_path / "cond.csv"
    rows = bench.bench_condition(cfg, out)
    assert len(rows) == 4 and len(read_rows(out)) == 5
    assert read_rows(out)[0] == bench.CONDITION_COLUMNS
    kC = rows[0][3]
    assert rows[0][4] <= kC
    assert rows[2][4] <= rows[1][4]
    side = json.loads((tmp_path / "cond.csv.json").read_text())
    assert side["config"] == cfg


def test_bench_sparsity(tmp_path):
    cfg = {"d": 3, "N": 400, "shape": "cube", "kernel": {"nu": 0.5, "rho": 0.5},
           "index_set": {"kind": "TD", "w": 2}, "taus": [0.5, 1.0, "inf"]}
    rows = bench.bench_sparsity(cfg, tmp_path / "sp.csv")
    assert [r[5] for r in rows] == [0.5, 1.0, math.inf]
    assert rows[-1][-1] <= 1e-10
    for r in rows:
        assert 0 < r[7] <= 100
        assert r[6] is None and r[8] is None and r[10] is None     # timings off
    assert rows[0][7] < rows[-1][7]
    timed = bench.bench_sparsity({**cfg, "taus": [1.0]}, None, timings=True)
    assert timed[0][6] is not None and timed[0][6] >= 0


def test_bench_sparsity_high_dimension_hc_well_conditioned():
    # sphere, HC trend, finest level only, kernel (5/4, 10) as in the sparsity
    # table; x^2 terms of HC(10, 3) are dependent on the sphere
    X = sample_points("sphere", 4000, 10, 0)
    t = build_tree(X, 42, "kD", 0).t
    cfg = {"d": 10, "N": 4000, "shape": "sphere", "kernel": {"nu": 1.25, "rho": 10.0},
           "index_set": {"kind": "HC", "w": 3, "allow_rank_deficient": True}, "taus": ["inf"], "n": t}
    rows = bench.bench_sparsity(cfg)
    assert rows[0][3] is not None and rows[0][3] < 100, rows[0]


def test_bench_estimation_single_replicate(tmp_path):
    cfg = {"d": 2, "N": 200, "M": 1, "kernel": {"nu": 1.25, "rho": 0.5},
           "index_set": {"kind": "TD", "w": 1}, "optimizer": {"maxfev": 40}}
    rows = bench.bench_estimation(cfg, tmp_path / "e.csv")
    assert rows[0][6] == 0 and rows[0][7] == 0 and rows[0][9] == "single_replicate"
    again = bench.bench_estimation(cfg, tmp_path / "e2.csv")
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
    assert rows == again


def test_bench_estimation_replicates():
    cfg = {"d": 2, "N": 200, "M": 3, "kernel": {"nu": 1.25, "rho": 0.5},
           "index_set": {"kind": "TD", "w": 1}, "optimizer": {"maxfev": 60}}
    row = bench.bench_estimation(cfg)[0]
    assert row[8] == 3 and row[9] == "" and row[10] == 0
    assert row[6] > 0
    with pytest.raises(ConfigError):
        bench.bench_estimation({**cfg, "M": 0})


def test_bench_prediction(tmp_path):
    cfg = {"d": 3, "Ns": [500, 1000, 2000], "kernel": {"nu": 0.75, "rho": 1 / 6},
           "index_set": {"kind": "TD", "w": 2}, "seed": 0}
    rows = bench.bench_prediction(cfg, tmp_path / "p.csv")
    for r in rows:
        assert r[2] <= r[6]                     # preconditioned <= plain
        assert r[3] is None                     # timings off
    its = [r[2] for r in rows]
    assert its[0] <= its[1] <= its[2]
    # same code path as a stand-alone solve
    X = sample_points("cube", 1000, 3, 0)
    k = KernelSpec("matern", 0.75, 1 / 6)
    Z = sample_field(X, k, seed=1)
    S = build_index_set("TD", 3, 2)
    B = build_basis(build_tree(X, 2 * len(S), "kD", 0), X, S)
    assert solve_gamma(B, k, X, Z, True, 1e-3).iterations == rows[1][2]


def test_bench_cli_writes_sidecar(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d": 3, "N": 200, "kernel": {"rho": 0.5}, "grid": [{"kind": "TD", "w": 1}]}))
    assert cli("--out-dir", tmp_path, "bench-condition", "--config", cfg, "--out", "cond.csv") == 0
    assert (tmp_path / "cond.csv").exists() and (tmp_path / "cond.csv.json").exists()
    cfg.write_text(json.dumps({"d": 3, "kernel": {"rho": 0.5}}))
    assert cli("bench-condition", "--config", cfg) == 2
