import json
import os

import numpy as np
import pytest

from _cache import cli_scan, cli_solve, run_dir
from monopolist.cli import (
    EXIT_IO, EXIT_OK, EXIT_VERIFY, SUMMARY_KEYS, CliError, RunConfig, label_histogram, load_config, main,
    regime_bracket,
)
from monopolist.grid import format_field, parse_field
from monopolist.regions import parse_mask


def _summary(path):
    with open(os.path.join(path, "summary.json")) as fh:
        return json.load(fh)


# -- solve ---------------------------------------------------------------------------------------

def test_solve_a0_regime_a():
    rc, out = cli_solve(0.0, 129)
    assert rc == EXIT_OK
    s = _summary(out)
    assert s["regime"] == "A"
    for name in ("config.json", "field.csv", "mask.csv", "rays.json", "diagnostics.json", "summary.json"):
        assert os.path.exists(os.path.join(out, name))


def test_solve_a25_regime_c():
    rc, out = cli_solve(2.5, 129)
    assert rc == EXIT_OK
    s = _summary(out)
    assert s["regime"] == "C"
    assert os.path.exists(os.path.join(out, "leaf_residuals.csv"))


def test_solve_a05_has_bunching():
    rc, out = cli_solve(0.5, 129)
    assert rc == EXIT_OK
    s = _summary(out)
    assert s["regime"] in ("B", "C")
    assert s["areas"]["omega1"] > 0


def test_summary_schema():
    s = _summary(cli_solve(2.5, 129)[1])
    assert set(s) == set(SUMMARY_KEYS)
    assert set(s["areas"]) == {"omega0", "omega1", "omega2"}
    assert abs(sum(s["areas"].values()) - 1) <= 2 / 128


def test_config_echoed():
    out = cli_solve(0.0, 129)[1]
    with open(os.path.join(out, "config.json")) as fh:
        cfg = json.load(fh)
    assert cfg["a"] == 0.0 and cfg["n"] == 129 and cfg["mode"] == "solve"
    assert RunConfig.from_dict(cfg).to_dict() == cfg


def test_reruns_are_byte_identical():
    outs = [run_dir(f"det{k}") for k in range(2)]
    for o in outs:
        assert main(["solve", "--a", "1.0", "--n", "33", "--out", o]) == EXIT_OK
    for name in sorted(os.listdir(outs[0])):
        if name == "config.json":
            continue
        with open(os.path.join(outs[0], name), "rb") as f0, open(os.path.join(outs[1], name), "rb") as f1:
            assert f0.read() == f1.read(), name


# -- config ----------------------------------------------------------------------------------------

def test_flags_override_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"a": 1.0, "n": 33, "out": "x"}))
    cfg = load_config(str(p), {"a": 2.0, "n": None, "out": None, "mode": None})
    assert cfg.a == 2.0 and cfg.n == 33 and cfg.out == "x"


def test_unknown_config_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"a": 1.0, "colour": "red"}))
    with pytest.raises(CliError):
        load_config(str(p), {})
    assert main(["solve", "--config", str(p)]) == EXIT_IO


def test_unreadable_config(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == EXIT_IO


def test_bad_mode_in_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"mode": "dance"}))
    assert main(["--config", str(p)]) == EXIT_IO


# -- scan ------------------------------------------------------------------------------------------

def test_scan_regimes_and_bracket():
    rc, out, data = cli_scan(65)
    rec = data["records"]
    assert rc == EXIT_OK
    assert len(rec) == 13
    assert [r["a"] for r in rec if r["regime"] == "A"] == [0.0]
    assert all(r["regime"] == "C" for r in rec if r["a"] >= 2.086)
    br = data["bracket"]
    print("scan bracket", br, [(r["a"], r["regime"]) for r in rec])
    assert br is not None and br[1] - br[0] <= 0.25 + 1e-12
    for r in rec:
        assert abs(sum(r["areas"].values()) - 1) <= 2 / 64
        assert os.path.exists(os.path.join(out, f"a_{r['a']:.6g}", "summary.json"))
    assert os.path.exists(os.path.join(out, "scan.csv"))


def test_regime_bracket():
    rec = [{"a": 0.0, "regime": "A"}, {"a": 0.5, "regime": "B"}, {"a": 1.0, "regime": "C"}]
    assert regime_bracket(rec) == [0.5, 1.0]
    assert regime_bracket(rec[:2]) is None


def test_scan_rejects_bad_range(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"scan": {"a_min": 2.0, "a_max": 1.0, "steps": 3}}))
    assert main(["scan", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_IO


# -- verify -----------------------------------------------------------------------------------------

def test_verify_a0_passes():
    out = cli_solve(0.0, 129)[1]
    assert main(["verify", out]) == EXIT_OK
    with open(os.path.join(out, "verify.json")) as fh:
        rep = json.load(fh)
    assert rep["pass"] and not rep["failed"]


def test_verify_corrupted_field_fails(tmp_path, capsys):
    src = cli_solve(0.0, 129)[1]
    with open(os.path.join(src, "field.csv")) as fh:
        u = parse_field(fh.read())
    x1, x2 = u.grid.mesh()
    u.values[:] = u.values + 0.1 * x1 * x2
    (tmp_path / "field.csv").write_text(format_field(u))
    assert main(["verify", str(tmp_path)]) == EXIT_VERIFY
    err = capsys.readouterr().err
    assert "mass_omega0" in err
    with open(tmp_path / "verify.json") as fh:
        assert "mass_omega0" in json.load(fh)["failed"]


def test_verify_empty_directory(tmp_path, capsys):
    assert main(["verify", str(tmp_path)]) == EXIT_IO
    assert "missing artifacts" in capsys.readouterr().err


# -- export -----------------------------------------------------------------------------------------

def test_field_round_trip_bit_identical(tmp_path):
    src = os.path.join(cli_solve(2.5, 129)[1], "field.csv")
    j, c = tmp_path / "f.json", tmp_path / "f.csv"
    assert main(["export", src, "--format", "json", "--output", str(j)]) == EXIT_OK
    assert main(["export", str(j), "--format", "csv", "--output", str(c)]) == EXIT_OK
    with open(src, "rb") as f0:
        assert f0.read() == c.read_bytes()


def test_gnuplot_matrix_rows(tmp_path):
    src = os.path.join(cli_solve(0.0, 129)[1], "field.csv")
    d = tmp_path / "f.dat"
    assert main(["export", src, "--format", "gnuplot-matrix", "--output", str(d)]) == EXIT_OK
    rows = d.read_text().strip("\n").split("\n")
    assert len(rows) == 129
    assert all(len(r.split()) == 129 for r in rows)
    with open(src) as fh:
        u = parse_field(fh.read())
    assert np.array_equal(np.loadtxt(d).T, u.values)


def test_mask_export_preserves_histogram(tmp_path):
    src = os.path.join(cli_solve(2.5, 129)[1], "mask.csv")
    j, c = tmp_path / "m.json", tmp_path / "m.csv"
    assert main(["export", src, "--format", "json", "--output", str(j)]) == EXIT_OK
    assert main(["export", str(j), "--format", "csv", "--output", str(c)]) == EXIT_OK
    with open(src) as fh:
        _, lab0 = parse_mask(fh.read())
    _, lab1 = parse_mask(c.read_text())
    assert label_histogram(lab0) == label_histogram(lab1)
    assert json.loads(j.read_text())["kind"] == "mask"


def test_export_unknown_format(tmp_path):
    src = os.path.join(cli_solve(0.0, 129)[1], "field.csv")
    assert main(["export", src, "--format", "xlsx", "--output", str(tmp_path / "x")]) == EXIT_IO


def test_export_missing_input(tmp_path):
    assert main(["export", str(tmp_path / "nope.csv"), "--format", "json"]) == EXIT_IO


# -- ode and assemble --------------------------------------------------------------------------------

BLUNT = {"case": "C", "knots": 6, "w1": 0.62, "R1": 0.25, "R2": 0.2, "R3": 0.17, "R4": 0.03, "R5": -0.17}


def test_ode_mode(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"a": 2.5, "params": BLUNT}))
    out = tmp_path / "o"
    assert main(["ode", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    with open(out / "ode.json") as fh:
        d = json.load(fh)
    assert d["hypotenuse"] == pytest.approx(5.1892547876, abs=1e-9)
    assert d["neumann_identity_max"] <= 1e-8
    assert d["stingray_increasing"]


def test_ode_mode_needs_params(tmp_path):
    assert main(["ode", "--a", "2.5", "--out", str(tmp_path / "o")]) == EXIT_IO


def test_assemble_mode_from_params(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"a": 2.5, "n": 33, "params": BLUNT, "fit": {"sweeps": 0}}))
    out = tmp_path / "o"
    assert main(["assemble", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    s = _summary(out)
    assert s["hypotenuse"] == pytest.approx(5.1892547876, abs=1e-9)
    for name in ("residuals.json", "params.json", "omega0.json", "fit_trace.json", "mask.csv", "profile.csv"):
        assert (out / name).exists()
    assert main(["verify", str(out)]) in (EXIT_OK, EXIT_VERIFY)
