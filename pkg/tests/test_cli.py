import csv
import io
import json
import math
import shutil
import subprocess

import pytest

from freshma.cli import run


def table(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_analyze_polling_row(capsys):
    assert run(["analyze", "aoii", "--scheme", "polling"]) == 0
    rows = table(capsys.readouterr().out)
    assert len(rows) == 1
    assert rows[0]["method"] == "analytic"
    assert float(rows[0]["avg_aoii"]) > 0
    assert list(rows[0])[:5] == ["M", "N", "c", "lambda", "service"]


def test_analyze_scheme_kind_mismatch(capsys):
    assert run(["analyze", "peak", "--scheme", "polling"]) == 2


def test_optimize_fd(capsys):
    assert run(["optimize", "fd", "--K", "1", "--c", "3", "--lambda", "0.1"]) == 0
    row = table(capsys.readouterr().out)[0]
    assert 0.1 * math.e < float(row["w1_opt"]) < 0.7


def test_optimize_fd_infeasible_exits_3(capsys):
    assert run(["optimize", "fd", "--K", "1", "--c", "3", "--lambda", "0.2"]) == 3
    err = capsys.readouterr().err
    assert "0.17487" in err


def test_infeasible_w1_warns_but_succeeds(capsys):
    assert run(["analyze", "peak", "--scheme", "fd", "--w1", "0.9"]) == 0
    cap = capsys.readouterr()
    assert cap.err.startswith("warning:")
    assert table(cap.out)[0]["feasible"] == "false"


def test_usage_errors_exit_2(capsys):
    assert run([]) == 2
    assert run(["analyze", "aoii", "--scheme", "polling", "--M", "x"]) == 2
    assert run(["analyze", "aoii", "--scheme", "polling", "--M", "0"]) == 2
    assert run(["analyze", "aoii", "--scheme", "polling", "--sweep", "lambda"]) == 2


def test_simulate_zero_load_row(capsys):
    assert run(["simulate", "--scheme", "td", "--lambda", "0", "--slots", "2000", "--warmup", "0"]) == 0
    row = table(capsys.readouterr().out)[0]
    assert row["method"] == "simulated"
    assert float(row["peak_aoii"]) == 0 and float(row["L_bar"]) == 0


def test_solve_xd_policy(tmp_path, capsys):
    out = tmp_path / "policy.json"
    args = ["solve", "xd", "--M", "2", "--N2", "1", "--Q0max", "4", "--policy-out", str(out)]
    assert run(args) == 0
    assert json.loads(out.read_text())["policy"]
    capsys.readouterr()
    assert run(args[:-2] + ["--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["rows"][0]["method"] == "analytic" and doc["policy"]


def test_cli_sweep_flag(capsys):
    assert run(["analyze", "peak", "--scheme", "td", "--sweep", "N=3,4"]) == 0
    assert [r["N"] for r in table(capsys.readouterr().out)] == ["3", "4"]


def test_sweep_config(tmp_path):
    cfg = tmp_path / "fd.yaml"
    cfg.write_text("command: analyze\nscheme: fd\nw1: 0.5\nsweep:\n  parameter: lambda\n"
                   "  values: [0.05, 0.1, 0.15]\n")
    out = tmp_path / "fd.csv"
    assert run(["sweep", "--config", str(cfg), "--output", str(out)]) == 0
    rows = table(out.read_text())
    assert [float(r["lambda"]) for r in rows] == [0.05, 0.1, 0.15]


@pytest.mark.parametrize("text", ["", "command: analyze\nscheme: fd\nspeed: 2\n", "command: [\n"])
def test_bad_config_exits_2(tmp_path, capsys, text):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    assert run(["sweep", "--config", str(cfg)]) == 2
    assert "bad.yaml" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert run(["sweep", "--config", str(tmp_path / "none.yaml")]) == 2


@pytest.mark.skipif(shutil.which("freshma") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["freshma", "analyze", "aoii", "--scheme", "aloha"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("M,N,c,lambda,method,avg_aoii")
