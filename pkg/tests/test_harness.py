import csv
import filecmp
import json

import numpy as np
import pytest

from gridval import cli, harness
from gridval.case_io import ConfigurationError, format_matpower_case, synthetic_case


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    (d / "case4.m").write_text(format_matpower_case(synthetic_case([1, 2, 2], 2.0, 1.0, 60.0, 20.0), "case4"))
    (d / "s.json").write_text(json.dumps({"pv": {"ratings_kw": {"3": 600, "4": 600}}, "der": {}}))
    return d


def _args(small, *extra):
    return ["--case", str(small / "case4.m"), "--scenario", str(small / "s.json"), *extra]


def _run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    assert not mismatch and not errors, mismatch
    for sub in cmp.common_dirs:
        _same_tree(a / sub, b / sub)


def test_validate_is_deterministic(small, tmp_path, capsys):
    common = ["--hour", "13", "--samples", "5", "--full", "40", "--test", "20", "--replicates", "2", "--seed", "3"]
    for name in ("a", "b"):
        code, out, _ = _run(["validate", *_args(small, *common, "--out", str(tmp_path / name))], capsys)
        assert code == 0
    _same_tree(tmp_path / "a", tmp_path / "b")
    with open(tmp_path / "a" / "validate_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and {r["method"] for r in rows} == {"saa", "dro"}


def test_validate_seed_changes_output(small, tmp_path, capsys):
    common = ["--hour", "13", "--samples", "5", "--full", "40", "--test", "20"]
    for name, seed in (("a", "1"), ("b", "2")):
        assert _run(["validate", *_args(small, *common, "--seed", seed, "--out", str(tmp_path / name))], capsys)[0] == 0
    a = (tmp_path / "a" / "replicate_0" / "cost_oos.csv").read_bytes()
    b = (tmp_path / "b" / "replicate_0" / "cost_oos.csv").read_bytes()
    assert a != b


def test_solve_writes_solution(small, tmp_path, capsys):
    code, out, _ = _run(["solve", *_args(small, "--hours", "12,13", "--eps", "0.01", "--samples", "6", "--out", str(tmp_path))], capsys)
    assert code == 0
    sol = json.loads((tmp_path / "solution.json").read_text())
    assert set(sol) == {"12", "13"}
    assert all(v["status"] == "optimal" for v in sol.values())
    for name in ("objective.csv", "mu.csv", "lambda.csv"):
        assert (tmp_path / name).exists()


def test_sweep_objective_nonincreasing(small, tmp_path, capsys):
    code, out, _ = _run(["sweep", *_args(small, "--hour", "13", "--samples", "6", "--levels", "1,0.1,0.01,0.001", "--out", str(tmp_path))], capsys)
    assert code == 0
    rows = json.loads(out)["rows"]
    objs = [r[3] for r in rows]
    assert all(a >= b - 1e-7 for a, b in zip(objs, objs[1:]))


def test_export_matrices(small, tmp_path, capsys):
    assert _run(["export-matrices", *_args(small, "--out", str(tmp_path))], capsys)[0] == 0
    with open(tmp_path / "R.csv") as fh:
        rows = list(csv.reader(fh))
    R = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.allclose(R, R.T) and R.shape == (3, 3)


def test_critical_eps_and_value_report(small, tmp_path, capsys):
    code, _, _ = _run(["critical-eps", *_args(small, "--hour", "13", "--samples", "5", "--cluster", "3", "--grid", "1,0.01", "--out", str(tmp_path))], capsys)
    assert code == 0 and (tmp_path / "critical_eps.csv").exists()
    code, out, _ = _run(["value-report", *_args(small, "--hour", "13", "--samples", "5", "--out", str(tmp_path))], capsys)
    assert code == 0 and "13" in json.loads(out)


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    assert json.loads(capsys.readouterr().err.splitlines()[0])["error"] == "usage"
    with pytest.raises(SystemExit) as exc:
        cli.main(["solve", "--hours", "x"])
    assert exc.value.code == 2
    capsys.readouterr()
    code, _, err = _run(["validate", "--replicates", "0"], capsys)
    assert code == 2 and json.loads(err)["error"] == "usage"


def test_runtime_errors_exit_1(tmp_path, capsys):
    code, out, err = _run(["solve", "--case", str(tmp_path / "missing.m"), "--out", str(tmp_path)], capsys)
    assert code == 1 and out == ""
    doc = json.loads(err)
    assert doc["subcommand"] == "solve" and doc["message"]
    code, _, err = _run(["solve", "--hour", "25", "--out", str(tmp_path)], capsys)
    assert code == 1 and json.loads(err)["error"] == "ConfigurationError"


def test_run_config_validation():
    with pytest.raises(ConfigurationError):
        harness.RunConfig(n_samples=30, n_full=20)
    with pytest.raises(ConfigurationError):
        harness.RunConfig(eps="sometimes")
    with pytest.raises(ConfigurationError):
        harness.resolve_eps([0.1, 0.2], 3)
    assert np.allclose(harness.resolve_eps(0.1, 3), 0.1)


def test_joint_violation():
    v = np.array([[1.0, 1.0], [1.0, 1.2], [0.85, 1.0]])
    assert harness.joint_violation(v, 0.9, 1.1).tolist() == [False, True, True]


def test_out_of_sample_bundle_has_kkt(small):
    cfg = harness.RunConfig(case=str(small / "case4.m"), scenario=str(small / "s.json"), hours=(13,), eps="true", n_samples=5, n_full=40, n_test=20)
    bundle = harness.run_out_of_sample(cfg)
    assert set(bundle.kkt) == {"saa", "dro"}
    assert all(max(d.values()) <= 1e-6 for d in bundle.kkt.values())
    assert np.all(bundle.eps > 0)
