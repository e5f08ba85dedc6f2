import csv
import io
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from freshma.config import dump_config, load_config, parse_config, RunConfig
from freshma.errors import ConfigError, InvalidParameterError
from freshma.experiments import (
    ExperimentSpec,
    _fmt,
    column_order,
    rows_to_csv,
    rows_to_json,
    run_experiment,
    worker_count,
)


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_columns_parameters_sorted_then_metrics():
    rows = [{"peak_aoii": 1.0, "lambda": 0.1, "c": 3, "method": "analytic", "zeta": 2}]
    assert column_order(rows, ["lambda", "c"]) == ["c", "lambda", "method", "peak_aoii", "zeta"]


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_format_round_trips_to_twelve_digits(x):
    s = _fmt(x)
    assert s == "%.12g" % x
    assert float(s) == pytest.approx(x, rel=1e-11, abs=0)


def test_value_formatting():
    assert _fmt(None) == "" and _fmt(True) == "true" and _fmt(3) == "3"
    assert _fmt(0.1 + 0.2) == "0.3"


def test_analyze_sweep_rows():
    spec = ExperimentSpec("analyze", "fd", {"w1": 0.5}, {"parameter": "lambda", "values": [0.05, 0.1, 0.15]})
    rows = run_experiment(spec)
    assert [r["lambda"] for r in rows] == [0.05, 0.1, 0.15]
    assert all(r["method"] == "analytic" and r["feasible"] for r in rows)
    peaks = [r["peak_aoii"] for r in rows]
    assert peaks == sorted(peaks)
    table = read_csv(rows_to_csv(rows, spec.points()[0]))
    assert len(table) == 3
    assert list(table[0])[:2] == ["K", "N1"]


def test_infeasible_w1_warns():
    spec = ExperimentSpec("analyze", "fd", {"w1": 0.9})
    with pytest.warns(UserWarning):
        rows = run_experiment(spec)
    assert rows[0]["feasible"] is False


def test_compare_gives_two_rows():
    spec = ExperimentSpec("compare", "td", {"N": 3, "lambda": 0.05}, slots=20_000, warmup=500, seed=1)
    rows = run_experiment(spec)
    assert [r["method"] for r in rows] == ["analytic", "simulated"]
    assert rows[1]["seed"] == 1 and rows[1]["ci_half_width"] > 0


def test_workers_do_not_change_output():
    spec = ExperimentSpec("simulate", "polling", {}, {"parameter": "lambda", "values": [0.1, 0.2, 0.3]},
                          slots=5_000, warmup=100, seed=2)
    one = rows_to_csv(run_experiment(spec, 1), spec.points()[0])
    two = rows_to_csv(run_experiment(spec, 2), spec.points()[0])
    assert one == two


def test_json_output_nulls_non_finite():
    doc = json.loads(rows_to_json([{"a": float("nan"), "b": 1.5}], {"policy": []}))
    assert doc == {"rows": [{"a": None, "b": 1.5}], "policy": []}


def test_spec_validation():
    with pytest.raises(InvalidParameterError):
        ExperimentSpec("plot", "fd")
    with pytest.raises(InvalidParameterError):
        ExperimentSpec("analyze", "fd", {"M": 3})
    with pytest.raises(InvalidParameterError):
        ExperimentSpec("analyze", "fd", sweep={"parameter": "M", "values": [1]})
    with pytest.raises(InvalidParameterError):
        ExperimentSpec("analyze", "fd", sweep={"parameter": "lambda", "values": []})
    with pytest.raises(InvalidParameterError):
        ExperimentSpec("analyze", "fd", output={"path": None, "format": "xml"})


def test_worker_count(monkeypatch):
    monkeypatch.delenv("FRESHMA_WORKERS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("FRESHMA_WORKERS", "3")
    assert worker_count() == 3 and worker_count(2) == 2
    monkeypatch.setenv("FRESHMA_WORKERS", "x")
    with pytest.raises(InvalidParameterError):
        worker_count()


CONFIG = """\
command: analyze
scheme: fd
K: 1
c: 3
w1: 0.4
sweep:
  parameter: lambda
  values: [0.05, 0.1, 0.15]
format: csv
workers: 2
"""


def test_config_round_trip():
    cfg = parse_config(CONFIG)
    assert cfg.workers == 2
    assert cfg.spec.mode == "analyze" and cfg.spec.parameters == {"K": 1, "c": 3, "w1": 0.4}
    again = parse_config(dump_config(cfg))
    assert again == cfg


@given(st.sampled_from(["analyze", "simulate", "compare"]), st.sampled_from(["polling", "td", "fd"]),
       st.integers(0, 2**32), st.one_of(st.none(), st.integers(1, 8)))
def test_config_round_trip_property(command, scheme, seed, workers):
    spec = ExperimentSpec(command, scheme, {"lambda": 0.05}, seed=seed)
    cfg = RunConfig(spec, workers)
    assert parse_config(dump_config(cfg)) == cfg


def test_implied_schemes():
    assert parse_config("command: optimize\n").spec.scheme == "fd"
    assert parse_config("command: solve\n").spec.mode == "solve-mdp"
    assert parse_config("command: meanfield\nmode: peak\n").spec.parameters == {"mode": "peak"}
    with pytest.raises(ConfigError):
        parse_config("command: optimize\nscheme: td\n")


def test_unknown_keys_report_lines():
    with pytest.raises(ConfigError) as info:
        parse_config("command: analyze\nscheme: fd\nbandwidth: 3\n", "x.yaml")
    assert info.value.line == 3 and info.value.key_path == "bandwidth"
    assert "bandwidth (line 3)" in str(info.value)


@pytest.mark.parametrize("text,path", [
    ("", ""),
    ("- 1\n- 2\n", ""),
    ("command: draw\n", "command"),
    ("command: analyze\n", "scheme"),
    ("command: analyze\nscheme: fd\nsweep: [1]\n", "sweep"),
    ("command: analyze\nscheme: fd\nsweep: {parameter: lambda}\n", "sweep.values"),
    ("command: simulate\nscheme: fd\nslots: ten\n", "slots"),
    ("command: simulate\nscheme: fd\nworkers: 0\n", "workers"),
])
def test_schema_errors(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key_path == path


def test_parse_error_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config("command: analyze\nscheme: fd\nlambda: [0.1\n", "bad.yaml")
    assert info.value.line is not None and info.value.line >= 3
    assert str(info.value).startswith("bad.yaml:")


def test_load_config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(CONFIG)
    assert load_config(p).spec.sweep["values"] == [0.05, 0.1, 0.15]
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
