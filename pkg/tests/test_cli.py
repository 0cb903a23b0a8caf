import json
import subprocess
import sys

import pytest

from d2sdk import cli
from d2sdk.data import load_dataset

SMALL = ["--epochs", "1", "--n-per-class", "8", "--seed", "0"]


def run(args, capsys):
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


def test_lodo_writes_report(tmp_path, capsys):
    code, out, err = run(["lodo", "--out", str(tmp_path), "--variant", "ERM", "--variant", "TD",
                          "--held-out", "0,1", *SMALL], capsys)
    assert code == 0, err
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["ok"] and summary["runs"] == 4 and summary["hygiene_violations"] == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["rows"] == ["ERM", "TD"] and rep["columns"] == [0, 1]
    assert "Ave." in (tmp_path / "report.txt").read_text()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "plan.json"
    cfg.write_text(json.dumps({"variants": ["ConvExp"], "held_out": [3], "seeds": [5, 6],
                               "optim": {"epochs": 3, "lr0": 0.01}}))
    code, _, err = run(["select-report", "--config", str(cfg), "--out", str(tmp_path / "o"),
                        "--seed", "2", "--epochs", "1", "--n-per-class", "8"], capsys)
    assert code == 0, err
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["plan"]["seeds"] == [2]
    assert rep["plan"]["optim"] == {**rep["plan"]["optim"], "epochs": 1, "lr0": 0.01}
    assert rep["rows"] == ["ConvExp"]


@pytest.mark.parametrize("args", [
    ["lodo", "--out", "X", "--held-out", "9", *SMALL],
    ["lodo", "--out", "X", "--seeds", "", "--epochs", "1"],
    ["ablate", "--out", "X", "--variant", "ERM", *SMALL],
    ["lodo", "--out", "X", "--config", "/nonexistent/plan.json"],
])
def test_config_errors_are_one_json_line(args, tmp_path, capsys):
    args = [str(tmp_path / "out") if a == "X" else a for a in args]
    code, out, err = run(args, capsys)
    assert code == 2
    lines = err.strip().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["error"] == "ConfigError"
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("args", [["frobnicate"], ["lodo"], ["lodo", "--out", "x", "--variant", "Big"]])
def test_usage_errors(args, capsys):
    code, _, err = run(args, capsys)
    assert code == 2
    assert json.loads(err.strip())["error"] == "UsageError"


def test_gen_data(tmp_path, capsys):
    path = tmp_path / "d" / "s4.csv"
    code, out, _ = run(["gen-data", "--out", str(path), "--seed", "3", "--n-per-class", "4"], capsys)
    assert code == 0
    assert json.loads(out)["samples"] == 4 * 5 * 4
    assert load_dataset(path).seed == 3


def test_grad_check(tmp_path, capsys):
    code, out, _ = run(["grad-check", "--out", str(tmp_path / "g.json")], capsys)
    assert code == 0
    res = json.loads(out)
    assert res["passed"] and res["max_rel_error"] < 1e-4


def test_grad_check_failure_exits_nonzero(capsys):
    code, _, err = run(["grad-check", "--tol", "1e-12"], capsys)
    assert code == 1
    assert json.loads(err.strip())["error"] == "NumericError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "d2sdk", "gen-data", "--out", str(tmp_path / "x.csv"),
                           "--n-per-class", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["ok"]
