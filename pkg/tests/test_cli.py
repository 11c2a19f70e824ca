import csv
import json
import os

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import ndtr

from excursets import cli
from excursets import excursions as ex
from excursets import io


def _write_posterior(d, mean, Q=None, C=None):
    io.write_vector(d / "mean.csv", mean)
    if Q is not None:
        io.write_matrix(d / "Q.mtx", sp.csc_matrix(Q))
        return ["--precision", str(d / "Q.mtx"), "--mean", str(d / "mean.csv")]
    io.write_matrix(d / "C.mtx", np.asarray(C))
    return ["--covariance", str(d / "C.mtx"), "--mean", str(d / "mean.csv")]


def _read_F(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_identity_toy(tmp_path):
    args = _write_posterior(tmp_path, [2.0, 2.0, -2.0], Q=np.eye(3))
    assert _run("excursion", *args, "--alpha", 0.05, "--out", tmp_path / "o") == 0
    rows = _read_F(tmp_path / "o" / "F.csv")
    assert [int(r["in_set_at_alpha"]) for r in rows] == [1, 1, 0]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["set_size"] == 2
    assert summary["estimate"] == pytest.approx(ndtr(2.0) ** 2, rel=1e-10)
    assert (tmp_path / "o" / "excursion.png").stat().st_size > 0


def test_missing_mean_file(tmp_path, capsys):
    io.write_matrix(tmp_path / "Q.mtx", sp.identity(2))
    code = _run("excursion", "--precision", tmp_path / "Q.mtx", "--mean", tmp_path / "absent.csv",
                "--out", tmp_path / "o")
    assert code == 2
    assert "absent.csv" in capsys.readouterr().err


def test_bad_arguments_exit_two(tmp_path):
    assert _run("excursion", "--alpha", 2.0, "--out", tmp_path) == 2
    assert _run("verify", "ex9", "--out", tmp_path / "v") == 2


def test_same_seed_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    A = rng.standard_normal((8, 8))
    args = _write_posterior(tmp_path, rng.standard_normal(8), C=A @ A.T + 8 * np.eye(8))
    for name in ("a", "b"):
        assert _run("contour", *args, "--family", "avoid2", "--particles", 500, "--seed", 3,
                    "--out", tmp_path / name) == 0
    for f in ("F.csv", "trace.csv", "summary.json", "excursion.png", "contour.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    ma.pop("wall_time"), mb.pop("wall_time")
    assert ma == mb


def test_emitted_function_reproduces_membership(tmp_path):
    rng = np.random.default_rng(1)
    A = rng.standard_normal((10, 10))
    args = _write_posterior(tmp_path, rng.normal(0.5, 1.0, 10), C=A @ A.T / 10 + np.eye(10))
    assert _run("excursion", *args, "--alpha", 0.2, "--particles", 500, "--no-plots", "--out", tmp_path / "o") == 0
    rows = _read_F(tmp_path / "o" / "F.csv")
    F = np.array([float(r["F"]) for r in rows])
    flags = np.array([int(r["in_set_at_alpha"]) for r in rows])
    members = np.zeros(F.size, dtype=int)
    members[ex.set_from_function(F, 0.2)] = 1
    np.testing.assert_array_equal(members, flags)


def test_contour_single_symmetric_node(tmp_path):
    args = _write_posterior(tmp_path, [0.0], Q=np.eye(1))
    assert _run("contour", *args, "--out", tmp_path / "o") == 0
    row = _read_F(tmp_path / "o" / "F.csv")[0]
    assert float(row["F"]) == pytest.approx(0.5) and float(row["Fc"]) == pytest.approx(0.5)


def test_contour_deterministic_toy_is_empty(tmp_path):
    args = _write_posterior(tmp_path, [1.0, -1.0, 2.0], C=1e-30 * np.eye(3))
    assert _run("contour", *args, "--alpha", 0.01, "--out", tmp_path / "o") == 0
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["contour_size"] == 0


def test_contour_sign_flip_mirrors_sides(tmp_path):
    C = np.array([[1.0, 0.3], [0.3, 1.0]])
    (tmp_path / "p").mkdir()
    (tmp_path / "m").mkdir()
    a = _write_posterior(tmp_path / "p", [1.0, -0.5], C=C)
    b = _write_posterior(tmp_path / "m", [-1.0, 0.5], C=C)
    assert _run("contour", *a, "--level", 0.2, "--out", tmp_path / "oa") == 0
    assert _run("contour", *b, "--level", -0.2, "--out", tmp_path / "ob") == 0
    sa = [int(r["side"]) for r in _read_F(tmp_path / "oa" / "F.csv")]
    sb = [int(r["side"]) for r in _read_F(tmp_path / "ob" / "F.csv")]
    assert sa == [-s for s in sb]


def test_family_direction_mismatch(tmp_path):
    args = _write_posterior(tmp_path, [0.0, 1.0], Q=np.eye(2))
    assert _run("excursion", *args, "--family", "avoid1", "--out", tmp_path / "o") == 2
    assert _run("excursion", *args, "--family", "two-smooth", "--out", tmp_path / "o") == 2


def test_numerical_failure_exit_three(tmp_path):
    args = _write_posterior(tmp_path, [0.0, 0.0], Q=np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert _run("excursion", *args, "--out", tmp_path / "o") == 3
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert err["error"] == "numerical"


def test_config_set_input(tmp_path):
    for i, shift in enumerate((0.0, 0.5)):
        io.write_vector(tmp_path / f"m{i}.csv", [1.0 + shift, 2.0, -1.0])
        io.write_matrix(tmp_path / f"Q{i}.mtx", sp.identity(3) * (1 + i))
    doc = {"configs": [{"theta": {"k": 0}, "weight": 0.3, "mean": "m0.csv", "precision": "Q0.mtx"},
                       {"theta": {"k": 1}, "weight": 0.7, "mean": "m1.csv", "precision": "Q1.mtx"}]}
    (tmp_path / "cs.json").write_text(json.dumps(doc))
    for method in ("eb", "qc", "ni"):
        assert _run("excursion", "--configs", tmp_path / "cs.json", "--method", method, "--particles", 300,
                    "--no-plots", "--out", tmp_path / method) == 0
    s = json.loads((tmp_path / "ni" / "summary.json").read_text())
    assert s["method"] == "ni" and s["n"] == 3


def test_rerun_reproduces(tmp_path):
    args = _write_posterior(tmp_path, [1.0, 0.5, -0.2], Q=np.eye(3) * 2)
    assert _run("excursion", *args, "--particles", 300, "--out", tmp_path / "o") == 0
    assert _run("rerun", tmp_path / "o" / "manifest.json", "--out", tmp_path / "r") == 0
    io.write_vector(tmp_path / "mean.csv", [9.0, 9.0, 9.0])
    assert _run("rerun", tmp_path / "o" / "manifest.json", "--out", tmp_path / "r2") == 2


def test_verify_ex2_small(tmp_path):
    code = _run("verify", "ex2", "--scale", 8, "--replicates", 2, "--particles", 500, "--out", tmp_path / "v")
    assert code in (0, 4)
    report = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert (code == 0) == report["passed"]
    assert os.path.exists(tmp_path / "v" / "sizes.csv")


def test_verify_ex1_small(tmp_path):
    code = _run("verify", "ex1", "--scale", 120, "--draws", 4000, "--particles", 1000, "--out", tmp_path / "v")
    assert code in (0, 4)
    with open(tmp_path / "v" / "coverage.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 99 and set(rows[0]) >= {"alpha", "method", "p_hat", "diff", "se"}
    assert (tmp_path / "v" / "coverage.png").exists()
