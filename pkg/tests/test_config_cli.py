import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from flatqe.cli import dumps_json, format_float, main
from flatqe.config import ConfigError, ExperimentConfig, parse_config

ROOT = Path(__file__).resolve().parents[1]

TORUS = """\
version: 1
geometry: {kind: torus, theta: [0.3, 0.7]}
p: [0, 2]
eigen: {count: 40}
symbols:
  - {name: one, fibre: {constant: 1.0}}
  - {name: x3, fibre: {bloch: [3]}}
"""


def write(tmp_path, text, name="cfg.yaml"):
    f = tmp_path / name
    f.write_text(text)
    return f


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- config parsing ------------------------------------------------------------

def test_parse_defaults():
    cfg = parse_config(TORUS, "t.yaml")
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.p == (0, 2) and cfg.count == 40
    assert [s.name for s in cfg.build_symbols()] == ["one", "x3"]


@pytest.mark.parametrize("text, line, msg", [
    ("version: 1\np: [0]\nbogus: 3\n", 3, "bogus"),
    ("version: 1\np: [0, -1]\n", 2, "p"),
    ("version: 1\ngeometry: {kind: sphere}\n", 2, "kind"),
    ("version: 1\np: [0]\nsymbols:\n  - {name: s, fibre: {bloch: [4]}}\n", 4, "bloch"),
    ("version: 99\n", 1, "version"),
])
def test_config_errors_are_line_anchored(text, line, msg):
    with pytest.raises(ConfigError) as e:
        parse_config(text, "bad.yaml")
    assert str(e.value).startswith(f"bad.yaml:{line}:")
    assert msg in str(e.value)


def test_config_hash_stable():
    a = parse_config(TORUS, "a.yaml")
    b = parse_config(TORUS, "b.yaml")
    assert a.config_hash() == b.config_hash()
    c = parse_config(TORUS.replace("count: 40", "count: 41"), "c.yaml")
    assert a.config_hash() != c.config_hash()


# -- serialization -------------------------------------------------------------

def test_float_format_round_trips():
    for x in (0.1, 1 / 3, math.pi * 1e-300, 2.0 ** 0.5):
        assert float(format_float(x)) == x


def test_json_handles_non_finite_and_complex():
    d = json.loads(dumps_json({"b": float("nan"), "a": 1 + 2j, "c": [np.float64(0.5)]}))
    assert d == {"a": [1.0, 2.0], "b": None, "c": [0.5]}


# -- CLI -----------------------------------------------------------------------

def test_cli_config_error_exit_code(tmp_path, capsys):
    f = write(tmp_path, "version: 1\np: [0]\nwat: 1\n")
    assert main(["spectra", "--config", str(f), "--cache", "none"]) == 2
    assert f"{f}:3:" in capsys.readouterr().err


def test_cli_runtime_error_exit_code(tmp_path):
    text = TORUS + "weyl: {lam_grid: [1.0e9]}\n"
    f = write(tmp_path, text)
    assert main(["weyl-law", "--config", str(f), "--out", str(tmp_path / "o"),
                 "--cache", "none"]) == 3


def test_toeplitz_identity(tmp_path):
    f = write(tmp_path, TORUS)
    out = tmp_path / "o"
    assert main(["toeplitz", "--config", str(f), "--out", str(out), "--cache", "none"]) == 0
    rows = [r for r in read_csv(out / "toeplitz.csv") if r["symbol"] == "one"]
    for r in rows:
        assert abs(float(r["re"]) - (r["row"] == r["col"])) < 1e-14
        assert abs(float(r["im"])) < 1e-14
    assert len(rows) == 1 + 9


def test_torus_spectra_match_lattice(tmp_path):
    f = write(tmp_path, TORUS)
    out = tmp_path / "o"
    assert main(["spectra", "--config", str(f), "--out", str(out), "--cache", "none"]) == 0
    theta = np.array([0.3, 0.7])
    for r in read_csv(out / "spectra.csv"):
        p, j = int(r["p"]), int(r["weight"])
        beta = theta * (p - 2 * j) / 4
        n = np.array([int(r["n1"]), int(r["n2"])])
        lam = 4 * np.pi ** 2 * np.sum((n + beta) ** 2)
        assert float(r["eigenvalue"]) == pytest.approx(lam, rel=1e-14, abs=1e-14)


def test_outputs_byte_identical_and_documented(tmp_path):
    f = write(tmp_path, TORUS)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["spectra", "--config", str(f), "--out", str(out), "--cache", "none"]) == 0
        outs.append(out)
    for name in ("spectra.csv", "spectra.json", "spectra.gp"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    raw = (outs[0] / "spectra.csv").read_bytes()
    assert raw.count(b"\r\n") == raw.count(b"\n") > 1
    header = raw.split(b"\r\n")[0].decode().split(",")
    report = json.loads((outs[0] / "spectra.json").read_text())
    assert set(header) == set(report["columns"])
    assert all(c["unit"] and c["description"] for c in report["columns"].values())
    assert report["n_rows"] == 80 and report["schema_version"] >= 1
    prov = json.loads((outs[0] / "provenance.json").read_text())
    assert "seconds" in prov and "seconds" not in (outs[0] / "spectra.json").read_text()


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "flatqe.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0
    for cmd in ("spectra", "toeplitz", "weyl-law", "egorov", "variance", "equidistribution",
                "extract", "birkhoff"):
        assert cmd in r.stdout


@pytest.mark.parametrize("name", sorted(p.name for p in (ROOT / "configs").glob("*.yaml")))
def test_shipped_configs_parse(name):
    text = (ROOT / "configs" / name).read_text()
    cfg = parse_config(text, name)
    assert cfg.build_symbols() is not None
