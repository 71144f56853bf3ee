from __future__ import annotations

import csv
import textwrap
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from strdecomp.cli import main, read_table

SVG = "{http://www.w3.org/2000/svg}"


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def fixture_series(n=48, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    temp = np.sin(2 * np.pi * t / 12 + 0.3) + 0.1 * rng.standard_normal(n)
    y = 0.05 * t + np.sin(2 * np.pi * t / 6) + 0.5 * temp + 0.1 * rng.standard_normal(n)
    return t, y, temp


@pytest.fixture
def workdir(tmp_path):
    t, y, temp = fixture_series()
    rows = [[int(ti), repr(float(yi)), repr(float(xi)), int(ti) % 3 == 0] for ti, yi, xi in zip(t, y, temp)]
    rows[10][1] = ""  # one missing value
    write_csv(tmp_path / "data.csv", ["t", "y", "temp", "flag"], [[a, b, c, int(d)] for a, b, c, d in rows])
    return tmp_path


def config(tmp_path, body, name="run.yaml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body), encoding="utf-8")
    return p


FIXED = """\
input: data.csv
value_column: y
time_column: t
model:
  trend: 5
  seasonal:
    - name: half
      cycle: 6
      lambdas: [2, 2, 4]
  covariates:
    - name: temperature
      kind: flexible
      column: temp
      thetas: [3]
    - name: flag
      kind: static
      column: flag
"""


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def read_components(path):
    table = read_table(path)
    return {k: np.array([float(v) if v != "" else np.nan for v in col]) for k, col in table.items() if k != "time"}


def test_decompose_writes_consistent_artifacts(workdir, capsys):
    cfg = config(workdir, FIXED)
    code, out, err = run(["decompose", "-c", str(cfg), "-o", str(workdir / "out")], capsys)
    assert code == 0, err
    comp = read_components(workdir / "out" / "components.csv")
    parts = ["trend", "half", "temperature", "flag", "remainder"]
    for p in parts[:-1]:
        assert f"{p}_lower" in comp and f"{p}_upper" in comp
        assert np.all(comp[f"{p}_lower"] <= comp[p]) and np.all(comp[p] <= comp[f"{p}_upper"])
    obs = ~np.isnan(comp["observed"])
    total = sum(comp[p] for p in parts)
    assert np.max(np.abs(total[obs] - comp["observed"][obs])) < 1e-8
    assert np.isnan(comp["remainder"][10]) and np.isnan(comp["observed"][10])
    lam = read_table(workdir / "out" / "lambdas.csv")
    assert lam["parameter"] == ["half.tt", "half.st", "half.ss", "trend", "temperature.tt"]
    assert set(lam["source"]) == {"fixed"}
    root = ET.parse(workdir / "out" / "decomposition.svg").getroot()
    ids = {g.get("id") for g in root.iter(f"{SVG}g")}
    for p in ["data"] + parts:
        assert f"panel-{p}" in ids


def test_decompose_is_byte_identical_across_runs(workdir, capsys):
    cfg = config(workdir, FIXED)
    for d in ("a", "b"):
        assert run(["decompose", "-c", str(cfg), "-o", str(workdir / d)], capsys)[0] == 0
    for name in ("components.csv", "lambdas.csv", "decomposition.svg"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_auto_parameters_are_cross_validated(workdir, capsys):
    cfg = config(
        workdir,
        FIXED.replace("trend: 5", "trend: auto")
        + "cv:\n  max_evals: 12\n  starts:\n    - {}\n    - {trend: 20}\n",
    )
    code, _, err = run(["decompose", "-c", str(cfg), "-o", str(workdir / "out")], capsys)
    assert code == 0, err
    lam = read_table(workdir / "out" / "lambdas.csv")
    assert lam["source"][lam["parameter"].index("trend")] == "cv"
    assert lam["parameter"][-1] == "cv_score"
    trace = read_table(workdir / "out" / "cv_trace.csv")
    assert list(trace) == ["evaluation", "log_trend", "score"]
    assert len(trace["score"]) <= 24
    assert float(trace["log_trend"][0]) == 0.0


def test_robust_fit_has_no_intervals(workdir, capsys):
    cfg = config(workdir, FIXED + "fit: robust\n")
    assert run(["decompose", "-c", str(cfg), "-o", str(workdir / "out")], capsys)[0] == 0
    comp = read_table(workdir / "out" / "components.csv")
    assert set(comp["trend_lower"]) == {""}


def test_gls_and_log_transform(workdir, capsys):
    t, y, _ = fixture_series()
    write_csv(workdir / "pos.csv", ["y"], [[repr(float(v))] for v in np.exp(0.1 * y)])
    cfg = config(workdir, "input: pos.csv\nvalue_column: y\nlog: true\nfit: gls\ngls:\n  ar1: 0.3\n")
    assert run(["decompose", "-c", str(cfg), "-o", str(workdir / "out")], capsys)[0] == 0
    comp = read_components(workdir / "out" / "components.csv")
    assert np.allclose(comp["observed"], 0.1 * y, atol=1e-12)


def test_forecast_extends_a_line(tmp_path, capsys):
    write_csv(tmp_path / "line.csv", ["t", "y"], [[i, repr(2.0 + 0.5 * i)] for i in range(30)])
    cfg = config(tmp_path, "input: line.csv\nvalue_column: y\ntime_column: t\nmodel:\n  trend: 3\nhorizon: 5\n")
    code, _, err = run(["forecast", "-c", str(cfg), "-o", str(tmp_path / "out")], capsys)
    assert code == 0, err
    fc = read_table(tmp_path / "out" / "forecast.csv")
    assert [float(v) for v in fc["time"]] == [30.0, 31.0, 32.0, 33.0, 34.0]
    assert np.allclose([float(v) for v in fc["mean"]], 2.0 + 0.5 * np.arange(30, 35), atol=1e-6)
    assert all(float(lo) <= float(m) <= float(hi) for lo, m, hi in zip(fc["lower"], fc["mean"], fc["upper"]))


def test_forecast_with_future_covariates(workdir, capsys):
    cfg = config(workdir, FIXED.replace("time_column: t\n", "") + "horizon: 4\n")
    rows = list(csv.reader((workdir / "data.csv").open()))
    for r in rows[-4:]:
        r[1] = ""
    write_csv(workdir / "data.csv", rows[0], rows[1:])
    code, _, err = run(["forecast", "-c", str(cfg), "-o", str(workdir / "out")], capsys)
    assert code == 0, err
    assert len(read_table(workdir / "out" / "forecast.csv")["mean"]) == 4


def test_graph_topology_from_a_map_column(tmp_path, capsys):
    n = 40
    rng = np.random.default_rng(1)
    node = np.arange(n) % 3
    y = np.array([0.0, 1.0, -1.0])[node] + 0.02 * np.arange(n) + 0.05 * rng.standard_normal(n)
    write_csv(tmp_path / "g.csv", ["y", "node"], [[repr(float(a)), int(b)] for a, b in zip(y, node)])
    cfg = config(
        tmp_path,
        """\
        input: g.csv
        value_column: y
        model:
          trend: 10
          seasonal:
            - name: cyc
              topology:
                successors: [[1], [2], [0]]
              map_column: node
              lambdas: [1, 1, 1]
        """,
    )
    assert run(["decompose", "-c", str(cfg), "-o", str(tmp_path / "out")], capsys)[0] == 0
    comp = read_components(tmp_path / "out" / "components.csv")
    assert np.max(np.abs(comp["trend"] + comp["cyc"] + comp["remainder"] - comp["observed"])) < 1e-8


@pytest.mark.parametrize(
    "body, code, message",
    [
        ("input: data.csv\nvalue_column: nope\n", 3, "data error: value column 'nope' not found"),
        ("input: absent.csv\n", 3, "cannot read input"),
        ("input: data.csv\nvalue_column: y\nmodel:\n  trend: [1]\n", 2, "config error: line 4"),
        ("input: data.csv\nvalue_column: y\nmodel:\n  trend: 0\n", 4, "numerical error"),
        ("input: data.csv\nvalue_column: temp\nlog: true\n", 3, "positive"),
        ("input: data.csv\nvalue_column: y\nmodel:\n  trend: auto\ncv:\n  start: {half.tt: 1}\n", 2, "not searched"),
    ],
)
def test_exit_codes(workdir, capsys, body, code, message):
    cfg = config(workdir, body)
    got, _, err = run(["decompose", "-c", str(cfg), "-o", str(workdir / "out")], capsys)
    assert got == code
    assert message in err
    assert len(err.strip().splitlines()) == 1


def test_bad_rows_are_data_errors(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("y\n1\nx\n3\n", encoding="utf-8")
    cfg = config(tmp_path, "input: bad.csv\nvalue_column: y\n")
    code, _, err = run(["decompose", "-c", str(cfg), "-o", str(tmp_path / "out")], capsys)
    assert code == 3 and "non-numeric" in err


def test_forecast_needs_a_horizon(workdir, capsys):
    cfg = config(workdir, "input: data.csv\nvalue_column: y\n")
    assert run(["forecast", "-c", str(cfg), "-o", str(workdir / "out")], capsys)[0] == 2


SIM = """\
cv:
  max_evals: 3
simulate:
  dgp: [stochastic, deterministic]
  n: 60
  gamma: 0.2
  replications: 2
  seed: 4
"""


def test_simulate_table_shape_and_determinism(tmp_path, capsys):
    cfg = config(tmp_path, SIM)
    for d in ("a", "b"):
        code, _, err = run(["simulate", "-c", str(cfg), "-o", str(tmp_path / d)], capsys)
        assert code == 0, err
    rows = list(csv.reader((tmp_path / "a" / "rmse.csv").open()))
    assert rows[0] == ["dgp", "gamma", "component", "rmse"]
    assert len(rows) == 1 + 8
    assert {r[0] for r in rows[1:]} == {"stochastic", "deterministic"}
    for name in ("rmse.csv", "replications.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    reps = read_table(tmp_path / "a" / "replications.csv")
    assert reps["replication"] == ["0", "1", "0", "1"]


def test_simulate_seed_override(tmp_path, capsys):
    cfg = config(tmp_path, SIM.replace("[stochastic, deterministic]", "stochastic").replace("replications: 2", "replications: 1"))
    run(["simulate", "-c", str(cfg), "-o", str(tmp_path / "a")], capsys)
    run(["simulate", "-c", str(cfg), "-o", str(tmp_path / "b"), "--seed", "5", "--threads", "1", "-v"], capsys)
    assert (tmp_path / "a" / "rmse.csv").read_bytes() != (tmp_path / "b" / "rmse.csv").read_bytes()


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "strdecomp", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "decompose" in out.stdout and "simulate" in out.stdout
