import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lestab import cli
from lestab import report as R
from lestab.config import load_config
from lestab.errors import InvalidArgument
from lestab.influence import SensitivityRecord as Rec
from lestab.influence import read_records


def recs_from(values, tr_cls, te_cls):
    return [Rec(a, b, float(values[a][b]), "influence", tr_cls[a], te_cls[b])
            for a in range(len(tr_cls)) for b in range(len(te_cls))]


# ------------------------------------------------------------ class matrix

def test_class_matrix_constant_and_mean():
    cm = R.class_matrix(recs_from(np.ones((4, 4)), [0, 0, 1, 1], [0, 1, 0, 1]))
    np.testing.assert_array_equal(cm.C, 1.0)
    np.testing.assert_array_equal(cm.counts, 4 * np.ones((2, 2)))
    one = R.class_matrix([Rec(0, 0, 1.0, train_class=5, test_class=5),
                          Rec(1, 0, 3.0, train_class=5, test_class=5)])
    assert one.C[0, 0] == 2.0 and one.K == 1


def test_class_matrix_missing_tag():
    with pytest.raises(InvalidArgument):
        R.class_matrix([Rec(0, 0, 1.0, train_class=0)])
    with pytest.raises(InvalidArgument):
        R.class_matrix([])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_class_matrix_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 5))
    tr, te = rng.integers(0, K, size=8).tolist(), rng.integers(0, K, size=6).tolist()
    V = rng.uniform(0, 2, size=(8, 6))
    classes = list(range(K))
    perm = rng.permutation(K)
    a = R.class_matrix(recs_from(V, tr, te), classes)
    b = R.class_matrix(recs_from(V, [int(perm[c]) for c in tr], [int(perm[c]) for c in te]),
                       classes)
    np.testing.assert_allclose(b.C[np.ix_(perm, perm)], a.C, atol=1e-15)
    np.testing.assert_array_equal(b.counts[np.ix_(perm, perm)], a.counts)


def test_class_matrix_cell_counts():
    tr, te = [0, 0, 0, 1], [0, 1, 1]
    cm = R.class_matrix(recs_from(np.ones((4, 3)), tr, te))
    np.testing.assert_array_equal(cm.counts, [[3, 6], [1, 2]])


def test_class_matrix_csv(tmp_path):
    cm = R.class_matrix(recs_from(np.arange(4.0).reshape(2, 2), [0, 1], [0, 1]))
    lines = cm.write_csv(tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "train_class,0,1"
    assert lines[2] == "1,2.0,3.0"


# --------------------------------------------------------------- summary

def test_summary_constant_records_ratio_one():
    s = R.stability_summary(recs_from(np.full((3, 4), 0.5), [0] * 3, [0] * 4), m=10)
    assert s.ratio == 1.0 and s.M_beta_hat == 5.0 and s.sup_E_beta_hat == 5.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_summary_invariants_and_duplicates(seed):
    rng = np.random.default_rng(seed)
    V = rng.exponential(size=(5, 7))
    recs = recs_from(V, [0] * 5, [0] * 7)
    s = R.stability_summary(recs, m=50)
    assert s.sup_E_beta_hat <= s.M_beta_hat and s.ratio >= 1
    assert math.isclose(s.M_beta_hat, 50 * V.max(), rel_tol=1e-12)
    assert math.isclose(s.sup_E_beta_hat, 50 * V.mean(axis=1).max(), rel_tol=1e-12)
    d = R.stability_summary(recs + recs, m=50)
    assert d.M_beta_hat == s.M_beta_hat
    assert math.isclose(d.sup_E_beta_hat, s.sup_E_beta_hat, rel_tol=1e-12)


def test_summary_unscaled_and_fresh():
    recs = recs_from([[1.0, 3.0]], [0], [0, 0])
    s = R.stability_summary(recs, m=10, scale=False, fresh_records=recs_from([[4.0, 0.0]], [0], [0, 0]))
    assert (s.M_beta_hat, s.sup_E_beta_hat, s.ratio) == (3.0, 2.0, 1.5)
    assert (s.sup_E_beta_fresh, s.M_beta_fresh) == (2.0, 4.0)


# ------------------------------------------------------------- pipelines

def _ridge_cfg(tmp_path, **sections):
    base = {"seed": 3, "out": str(tmp_path / "o"),
            "dataset": {"generator": "linear_gaussian", "d": 5, "m": 200, "test_m": 200},
            "model": {"family": "linear_ridge", "lam": 1e-2},
            "sensitivity": {"n_train": 20, "n_test": 15}, "validate": {"sample": 30}}
    base.update(sections)
    return load_config(base)


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix == ".csv"}


def test_pipelines_byte_identical(tmp_path):
    outs = []
    for run in range(2):
        cfg = _ridge_cfg(tmp_path, out=str(tmp_path / f"r{run}"))
        R.pipeline_gen(cfg)
        R.pipeline_sensitivity(cfg)
        R.pipeline_validate(cfg)
        outs.append(_files(tmp_path / f"r{run}"))
    assert outs[0] == outs[1]
    assert {"train_seed3.csv", "test_seed3.csv", "sensitivity_seed3.csv",
            "validate_pairs_seed3.csv"} <= set(outs[0])


def test_sgd_pipelines_byte_identical(tmp_path):
    sgd = {"T": 50, "eta": 0.05, "trials": 10, "removed_index": 2}
    outs = []
    for run in range(2):
        cfg = _ridge_cfg(tmp_path, out=str(tmp_path / f"s{run}"), sgd=sgd)
        R.pipeline_couple(cfg)
        R.pipeline_sgd(cfg)
        # manifests record the output directory, which differs between the two runs
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / f"s{run}").iterdir())
                     if not p.name.startswith("manifest_")})
    assert outs[0] == outs[1]
    assert "trace_seed3.csv" in outs[0]


def test_validate_pipeline_summary(tmp_path):
    cfg = _ridge_cfg(tmp_path)
    res = R.pipeline_validate(cfg)
    obj = json.loads((tmp_path / "o" / "validate_seed3.json").read_text())
    assert obj["median_rel_err"] == res["median_rel_err"] <= 0.05
    man = json.loads((tmp_path / "o" / "manifest_validate_seed3.json").read_text())
    assert man["seed"] == 3 and man["cg_tol"] == 1e-10


def test_sensitivity_blobs_matrix_shape(tmp_path):
    cfg = load_config({"seed": 0, "out": str(tmp_path),
                       "dataset": {"generator": "blobs", "d": 10, "K": 10, "per_class": 10,
                                   "test_per_class": 5},
                       "model": {"family": "softmax_head", "lam": 1e-3, "p": 32},
                       "sensitivity": {"n_train": 100, "n_test": 50}})
    res = R.pipeline_sensitivity(cfg)
    rows = (tmp_path / "class_matrix_seed0.csv").read_text().splitlines()
    assert len(rows) == 11 and all(len(r.split(",")) == 11 for r in rows)
    recs = read_records(res["files"]["records"])
    assert len(recs) == 100 * 50
    man = json.loads((tmp_path / "manifest_sensitivity_seed0.json").read_text())
    assert "damping" in man["settings"] and "cg_tol" in man["settings"]


def test_sensitivity_exact_and_stepwise_methods(tmp_path):
    for method in ("exact_loo", "stepwise"):
        cfg = _ridge_cfg(tmp_path, out=str(tmp_path / method),
                         sensitivity={"method": method, "n_train": 5, "n_test": 4})
        recs = read_records(R.pipeline_sensitivity(cfg)["files"]["records"])
        assert len(recs) == 20 and {r.method for r in recs} == {method}


def test_exact_loo_pipeline_close_to_influence(tmp_path):
    vals = {}
    for method in ("exact_loo", "influence"):
        cfg = _ridge_cfg(tmp_path, out=str(tmp_path / method),
                         sensitivity={"method": method, "n_train": 10, "n_test": 10})
        recs = read_records(R.pipeline_sensitivity(cfg)["files"]["records"])
        vals[method] = np.array([r.beta_hat for r in recs])
    rel = np.abs(vals["influence"] - vals["exact_loo"]) / vals["exact_loo"]
    assert np.median(rel) <= 0.05


def test_bounds_pipeline(tmp_path):
    cfg = _ridge_cfg(tmp_path, bounds={"m": 100, "delta": 0.1, "M_l": 1.0, "sup_E_beta": 0.2,
                                       "M_beta": 2.0})
    rep = R.pipeline_bounds(cfg)
    assert {"locally_elastic", "uniform"} <= set(rep.values)
    assert (tmp_path / "o" / "bounds.csv").exists()
    with pytest.raises(InvalidArgument):
        R.pipeline_bounds(_ridge_cfg(tmp_path))


def test_population_risk_matches_monte_carlo():
    from lestab.data import gen_two_cluster
    d = 4
    w = np.array([0.3, -0.1, 0.5, 0.2])
    ds = gen_two_cluster(d, 400000, 9)
    mc = np.mean((ds.X @ w - ds.y) ** 2)
    assert abs(R.ridge_population_risk(w, d) - mc) < 5e-3


def test_toy_quadrature():
    # E[(L z^2)^(1/3)] = L^(1/3) E[z^(2/3)] = L^(1/3) * 3/5 for z uniform on [0, 1]
    L = 2 ** 0.5 * math.exp(-0.5)
    assert math.isclose(R.toy_E_L_pow(1 / 3), L ** (1 / 3) * 0.6, rel_tol=1e-9)


# -------------------------------------------------------------------- CLI

def _write_cfg(tmp_path, obj):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(obj))
    return str(p)


def test_cli_bounds_prints(tmp_path, capsys):
    p = _write_cfg(tmp_path, {"bounds": {"m": 1000, "delta": 0.1, "M_l": 1,
                                         "kernel": {"kappa": 1.0, "E_kappa": 0.05,
                                                    "lam": 0.1, "B": 0.01}}})
    assert cli.main(["bounds", "--config", p, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "B1\t" in out and "B2\t" in out and "condition_eq3\t" in out


def test_cli_exit_codes(tmp_path, capsys):
    bad = _write_cfg(tmp_path, {"model": {"family": "linear_ridge", "lam": -1}})
    assert cli.main(["train", "--config", bad]) == 2
    assert "config error at model/lam" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["nonsense"]) == 2
    assert cli.main(["summary", "--out", str(tmp_path)]) == 2
    unknown = _write_cfg(tmp_path, {"colour": "red"})
    assert cli.main(["gen", "--config", unknown]) == 2


def test_cli_numeric_failure_exit_3(tmp_path, capsys):
    p = _write_cfg(tmp_path, {"dataset": {"generator": "two_cluster", "d": 3, "m": 40},
                              "model": {"family": "two_layer", "lam": 1e-3, "k": 3,
                                        "epochs": 2},
                              "influence": {"damping": 1e-12, "solver": "dense"},
                              "sensitivity": {"n_train": 5, "n_test": 5}})
    rc = cli.main(["sensitivity", "--config", p, "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "numeric failure" in capsys.readouterr().err


def test_cli_seed_flag_and_summary(tmp_path, capsys):
    p = _write_cfg(tmp_path, {"dataset": {"generator": "two_cluster", "d": 3, "m": 40,
                                          "test_m": 20},
                              "sensitivity": {"n_train": 10, "n_test": 10}})
    out = str(tmp_path / "o")
    assert cli.main(["--seed", "7", "sensitivity", "--config", p, "--out", out]) == 0
    capsys.readouterr()
    rec = tmp_path / "o" / "sensitivity_seed7.csv"
    assert rec.exists()
    assert cli.main(["summary", "--records", str(rec), "--m", "40"]) == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["summary"]["ratio"] >= 1 and "diagonal_mean" in obj


def test_cli_all_subcommands(tmp_path, capsys):
    p = _write_cfg(tmp_path, {"dataset": {"generator": "linear_gaussian", "d": 3, "m": 30,
                                          "test_m": 10},
                              "sensitivity": {"n_train": 5, "n_test": 5},
                              "validate": {"sample": 5},
                              "sgd": {"T": 20, "trials": 4, "eta": 0.05},
                              "bounds": {"m": 30, "delta": 0.1, "M_l": 1, "M_beta": 1}})
    out = str(tmp_path / "o")
    for cmd in ("gen", "train", "sensitivity", "validate", "bounds", "sgd-probe", "couple"):
        assert cli.main([cmd, "--config", p, "--out", out]) == 0, cmd
    names = {f.name for f in (tmp_path / "o").iterdir()}
    assert {"train_seed0.csv", "model_seed0.json", "sensitivity_seed0.csv", "validate_seed0.json",
            "bounds.json", "sgd_seed0.json", "trace_seed0.csv"} <= names


@pytest.mark.skipif(shutil.which("lestab") is None, reason="console script not installed")
def test_console_script_help():
    r = subprocess.run(["lestab", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sgd-probe" in r.stdout


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "lestab.cli", "bounds"], capture_output=True,
                       text=True, cwd=tmp_path)
    assert r.returncode == 2 and "bounds" in r.stderr
