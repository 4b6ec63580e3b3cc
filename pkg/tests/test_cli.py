import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from deeplinear.cli import main, parse_grid
from deeplinear.data import Dataset, save_csv
from deeplinear.plotting import Series, emit_plot
from deeplinear.errors import ContractViolation


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_train_scalar_example(tmp_path):
    code, out = run(
        tmp_path, "train", "--depth", "2", "--dims", "1,1,1", "--phi-scalar", "1",
        "--init", "identity", "--lr", "0.01", "--eps", "1e-5", "--plot",
    )
    assert code == 0
    summary = read_json(out / "summary.json")
    assert summary["status"] == "converged" and summary["final_loss"] <= 1e-5
    with open(out / "trace.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["t"] == "0" and len(rows) == summary["iterations"] + 1
    assert (out / "loss.svg").read_text().startswith("<?xml")
    assert read_json(out / "run_config.json")["command"] == "train"


def test_certificate_without_margin_exits_zero(tmp_path):
    code, out = run(tmp_path, "certificate", "--dims", "1,1,1", "--phi-scalar", "-1", "--init", "identity")
    assert code == 0
    cert = read_json(out / "certificate.json")
    assert cert["satisfied"] is False and cert["t_bound"] is None


def test_certificate_balanced_scalar_output(tmp_path):
    code, out = run(
        tmp_path, "certificate", "--dims", "16,4,1", "--target", "random_gaussian_target",
        "--init", "balanced", "--std", "1e-3",
    )
    assert code == 0
    assert "balanced_init" in read_json(out / "certificate.json")


def test_fail_margin_example(tmp_path, capsys):
    code, out = run(tmp_path, "fail-margin", "--dims", "2", "--depth", "2", "--lambda", "1", "--lr", "0.5", "--steps", "1000")
    assert code == 0
    assert "loss floor 0.5 held" in capsys.readouterr().out
    assert read_json(out / "verdict.json")["message"] == "loss floor 0.5 held"


def test_fail_unbalanced(tmp_path):
    code, out = run(tmp_path, "fail-unbalanced", "--margin", "0.75", "--lr", "0.01", "--depth", "2")
    assert code == 0
    v = read_json(out / "verdict.json")
    assert v["verdict"] is True and v["status"] == "diverged"


def test_verify_exit_codes(tmp_path):
    args = ["--dims", "2,2,2", "--phi-scalar", "1", "--weights"]
    w = {"dims": [2, 2, 2], "layers": [[[0.95, 0], [0, 0.9]], [[0.95, 0], [0, 0.9]]]}
    (tmp_path / "w.json").write_text(json.dumps(w))
    code, out = run(tmp_path, "verify", *args, str(tmp_path / "w.json"), "--max-iters", "200")
    assert code == 0 and read_json(out / "verify.json")["passed"] is True
    # a learning rate far above the certified one breaks the descent check
    code, _ = run(tmp_path, "verify", *args, str(tmp_path / "w.json"), "--lr", "3.0", "--max-iters", "50", name="o2")
    assert code == 2
    code, _ = run(tmp_path, "verify", "--dims", "1,1,1", "--phi-scalar", "-1", "--init", "identity", name="o3")
    assert code == 1


def test_sweep_and_monte_carlo(tmp_path):
    code, out = run(
        tmp_path, "sweep", "--dims", "4,4,4,1", "--target", "scalar_regression", "--init", "balanced",
        "--std-grid", "1e-2,0.1,1", "--max-iters", "2000", "--plot",
    )
    assert code == 0 and (out / "sweep.svg").exists()
    assert len(read_json(out / "sweep.json")["iterations"]) == 3
    code, out = run(tmp_path, "mc-balance", "--dims", "4", "--depth", "3", "--std", "0.1", "--delta", "1.386", name="mb")
    assert code == 0 and read_json(out / "report.json")["consistent"] is True
    code, out = run(
        tmp_path, "mc-margin", "--dims", "8,4,1", "--target", "random_gaussian_target",
        "--mode", "layerwise_claim3", "--std", "0.01", "--trials", "200", name="mm",
    )
    assert code == 0 and read_json(out / "report.json")["bound"] is None


def test_whiten_pipeline(tmp_path):
    rng = np.random.default_rng(0)
    save_csv(Dataset(rng.normal(size=(3, 40)), rng.normal(size=(1, 40))), tmp_path / "d.csv")
    code, out = run(tmp_path, "whiten", "--data", str(tmp_path / "d.csv"), "--header")
    assert code == 0
    prob = read_json(out / "problem.json")
    code, _ = run(
        tmp_path, "train", "--dims", "3,3,1", "--problem", str(out / "problem.json"),
        "--init", "balanced", "--std", "0.1", "--lr", "0.1", name="t",
    )
    assert code == 0 and prob
    (tmp_path / "bad.csv").write_text("1,2\n3\n")
    code, _ = run(tmp_path, "whiten", "--data", str(tmp_path / "bad.csv"), name="b")
    assert code == 1


def test_flow_compare(tmp_path):
    code, out = run(
        tmp_path, "flow-compare", "--dims", "1,1,1,1", "--phi-scalar", "1", "--w0", "0.5",
        "--lr", "1e-3", "--steps", "500", "--plot",
    )
    assert code == 0
    assert read_json(out / "summary.json")["max_deviation"] < 1e-2
    with open(out / "flow.csv") as f:
        assert f.readline().strip() == "tau,loss,sigma_min,frob_dev_from_gd"


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--dims", "1,1", "--phi-scalar", "1"],  # --lr missing
        ["train", "--dims", "1,x", "--phi-scalar", "1", "--lr", "0.1"],
        ["train", "--dims", "1,1", "--phi-scalar", "1", "--lr", "0.1", "--bogus"],
        ["train", "--dims", "2,2", "--lr", "0.1"],  # no target
        ["train", "--dims", "2,2", "--phi-scalar", "1", "--init", "balanced", "--lr", "0.1"],  # no std
        ["whiten", "--data", "missing.csv"],
        ["fail-unbalanced", "--depth", "3"],
        ["nonsense"],
        [],
    ],
)
def test_usage_and_input_errors_exit_one(tmp_path, argv):
    assert main([*argv, "--out", str(tmp_path / "o")] if argv else []) == 1


def test_config_replay_is_bit_exact(tmp_path):
    code, out = run(
        tmp_path, "train", "--dims", "3,3,3", "--target", "near_identity", "--init", "balanced",
        "--std", "0.5", "--lr", "0.05", "--seed", "11", "--plot",
    )
    assert code == 0
    assert main(["--config", str(out / "run_config.json"), "--out", str(tmp_path / "replay")]) == 0
    for name in ("trace.csv", "summary.json", "final_weights.json", "loss.svg", "run_config.json"):
        a = (out / name).read_bytes()
        b = (tmp_path / "replay" / name).read_bytes()
        assert a == b or name == "run_config.json"
    assert main(["--config", str(tmp_path / "nope.json")]) == 1


def test_default_seed_is_fixed(tmp_path):
    argv = ["mc-balance", "--dims", "3", "--depth", "2", "--std", "0.5", "--delta", "0.5", "--trials", "100"]
    run(tmp_path, *argv, name="a")
    run(tmp_path, *argv, name="b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_parse_grid():
    assert np.allclose(parse_grid("1e-4:1:5"), [1e-4, 1e-3, 1e-2, 1e-1, 1])
    assert parse_grid("0.5,2").tolist() == [0.5, 2.0]


def test_plot_deterministic_and_single_point(tmp_path):
    s = [Series("a", [1e-3, 1e-2, 1e-1], [10, 100, 5], censored=[False, True, False])]
    emit_plot(s, tmp_path / "a.svg", logx=True, logy=True)
    emit_plot(s, tmp_path / "b.svg", logx=True, logy=True)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert "(cap)" in (tmp_path / "a.svg").read_text() or b"cap" in (tmp_path / "a.svg").read_bytes()
    emit_plot([Series("p", [1.0], [2.0])], tmp_path / "one.svg")
    assert (tmp_path / "one.svg").read_text().rstrip().endswith("</svg>")
    with pytest.raises(ContractViolation):
        emit_plot([Series("e", [], [])], tmp_path / "e.svg")


@pytest.mark.skipif(shutil.which("deeplinear") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(
        ["deeplinear", "fail-margin", "--out", str(tmp_path / "o"), "--steps", "10"],
        capture_output=True, text=True,
    )
    assert r.returncode == 0 and "loss floor" in r.stdout
