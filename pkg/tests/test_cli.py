import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from varlab.cli import main, parse_signal
from varlab.config import bundled_text
from varlab.variations import LC2, LC3, Goh, Needle


@pytest.fixture
def worked_cfg(tmp_path):
    p = tmp_path / "worked.toml"
    p.write_text(bundled_text("worked_example"))
    return p


@pytest.fixture
def counter_cfg(tmp_path):
    p = tmp_path / "counter.toml"
    p.write_text(bundled_text("goh_counterexample"))
    return p


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_parse_signal():
    assert parse_signal("goh:1,2") == Goh(1, 2)
    assert parse_signal("lc2:1") == LC2(1)
    assert parse_signal("lc3") == LC3()
    assert parse_signal("needle:(-4,0)") == Needle((-4.0, 0.0))
    assert parse_signal("needle:-4,0") == Needle((-4.0, 0.0))


@pytest.mark.parametrize("bad", ["goh:1", "lc2:x", "lc3:1", "needle:", "needle:(a,b)", "spike:1"])
def test_bad_signal_exit_2(worked_cfg, bad, capsys):
    assert main(["verify", str(worked_cfg), "--signal", bad, "--tbar", "0.5"]) == 2
    assert "bad signal" in capsys.readouterr().err


def test_simulate(worked_cfg, capsys):
    assert main(["simulate", str(worked_cfg)]) == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["t", "x1", "x2", "x3"]
    last = [float(v) for v in rows[-1]]
    assert last[0] == 1.0 and np.allclose(last[1:], 0.0, atol=1e-12)


def test_simulate_adjoint(worked_cfg, capsys):
    assert main(["simulate", str(worked_cfg), "--adjoint", "0,0,-1"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0][-3:] == ["p1", "p2", "p3"]
    assert np.allclose([float(v) for v in rows[1][4:]], [0.0, -2.0, -1.0])
    assert main(["simulate", str(worked_cfg), "--adjoint", "0,1"]) == 2


def test_simulate_step_halving(worked_cfg, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", str(worked_cfg), "--step", "1e-3", "--out", str(a)])
    main(["simulate", str(worked_cfg), "--step", "5e-4", "--out", str(b)])
    xa = np.array([float(v) for v in _rows(a.read_text())[-1][1:]])
    xb = np.array([float(v) for v in _rows(b.read_text())[-1][1:]])
    assert np.max(np.abs(xa - xb)) <= 1e-9


def test_simulate_zero_horizon(tmp_path, capsys):
    text = bundled_text().replace("horizon = 1.0", "horizon = 0.0").replace(
        "grid = [0.0, 1.0]", "grid = [0.0]").replace("values = [[-2.0, 0.0]]", "values = []")
    p = tmp_path / "zero.toml"
    p.write_text(text)
    assert main(["simulate", str(p)]) == 0
    out = capsys.readouterr()
    assert _rows(out.out)[1:] == [["0", "2", "0", "0"]]
    assert "warning" in out.err


def test_verify_goh(worked_cfg, capsys):
    assert main(["verify", str(worked_cfg), "--signal", "goh:1,2", "--tbar", "0.5"]) == 0
    out = capsys.readouterr()
    rows = _rows(out.out)
    fitted = np.array([[float(v) for v in r[1:4]] for r in rows[1:]])
    eps = np.array([float(r[0]) for r in rows[1:]])
    assert np.allclose(fitted / eps[:, None], [0, 0, 72 / 289], atol=1e-9)
    assert "predicted coefficient 0.2491349480968858" in out.err


def test_verify_needle(worked_cfg, tmp_path, capsys):
    out = tmp_path / "n.csv"
    assert main(["verify", str(worked_cfg), "--signal", "needle:(-4,0)", "--tbar", "0.5", "--out", str(out)]) == 0
    assert "fitted coefficient 1.0000" in capsys.readouterr().out
    row = [float(v) for v in _rows(out.read_text())[1]]
    assert np.allclose(np.array(row[1:4]) / row[0], [-2, 0, 0], atol=1e-9)


def test_verify_reversed_and_params(worked_cfg, capsys):
    assert main(["verify", str(worked_cfg), "--signal", "goh:1,2", "--reversed", "--certify"]) == 0
    assert "predicted coefficient -0.2491" in capsys.readouterr().err
    assert main(["verify", str(worked_cfg), "--signal", "goh:1,2", "--alpha", "1,1", "--beta", "1,1"]) == 0
    assert "predicted coefficient 0.03125" in capsys.readouterr().err
    assert main(["verify", str(worked_cfg), "--signal", "goh:1,2", "--alpha", "1,1"]) == 2
    assert main(["verify", str(worked_cfg), "--signal", "goh:1,2", "--tbar", "0.01"]) == 2


def test_check_worked_example(worked_cfg, capsys):
    assert main(["check", str(worked_cfg)]) == 4
    assert "no PMP multiplier found" in capsys.readouterr().out


def test_check_counterexample(counter_cfg, tmp_path, capsys):
    js = tmp_path / "r.json"
    assert main(["check", str(counter_cfg), "--json", str(js)]) == 3
    assert "Goh(1,2)" in capsys.readouterr().out
    doc = json.loads(js.read_text())
    assert doc["exit_code"] == 3 and doc["multipliers"][0]["goh"]["1,2"]["violated"]


def test_check_singleton(tmp_path, capsys):
    p = tmp_path / "s.toml"
    p.write_text(bundled_text().replace(
        "sets = [[-4.0, -2.0, 0.0, 3.0], [-6.0, 0.0, 4.0, 7.0]]", "sets = [[-2.0], [0.0]]"))
    assert main(["check", str(p)]) == 0
    assert "PMP satisfied, no applicable higher-order test" in capsys.readouterr().out


def test_check_infeasible(tmp_path, capsys):
    p = tmp_path / "i.toml"
    p.write_text(bundled_text().replace("initial = [2.0, 0.0, 0.0]", "initial = [3.0, 0.0, 0.0]"))
    assert main(["check", str(p)]) == 5
    assert "infeasible endpoint" in capsys.readouterr().err


def test_config_error_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(bundled_text().replace('"-x2"', '"-x9"'))
    assert main(["simulate", str(p)]) == 2
    assert "system.controlled[0][2]" in capsys.readouterr().err


def test_example(capsys):
    assert main(["example", "--list"]) == 0
    assert "goh_counterexample" in capsys.readouterr().out
    assert main(["example"]) == 0
    assert "[system]" in capsys.readouterr().out


def test_deterministic_outputs(worked_cfg, tmp_path):
    outs = []
    for k in range(2):
        p = tmp_path / f"v{k}.csv"
        main(["verify", str(worked_cfg), "--signal", "goh:1,2", "--out", str(p)])
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_help_documents_exit_codes():
    res = subprocess.run([sys.executable, "-m", "varlab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for code in ("0 ", "2 ", "3 ", "4 ", "5 "):
        assert f"\n  {code}" in res.stdout
