import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from topoflock import cli
from topoflock import config as cf
from topoflock.exceptions import ArtifactIOError, ConfigurationError, SolverGuardError
from topoflock.io import read_cdf_csv, read_columns, read_density_csv, write_cdf_csv, write_csv, write_json
from topoflock.mass_coords import MassProfile, cdf_eval

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MASS = {
    "mode": "mass",
    "kernel": {"kind": "pure", "family": "constant", "params": {"value": 1.0}},
    "rho0": {"family": "uniform", "params": {"a": 0.0, "b": 1.0}},
    "velocity": {"family": "sine", "params": {"amplitude": 1.0}, "variable": "m"},
    "resolution": {"N": 32, "n_x": 50},
    "dt": 0.01,
    "t_final": 1.0,
    "output_times": [0.0, 0.5, 1.0],
}


def dump(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return p


def test_validate_ok(tmp_path, capsys):
    assert cli.main(["validate", str(dump(tmp_path, MASS))]) == 0
    assert "ok" in capsys.readouterr().out


@pytest.mark.parametrize("patch,key", [
    ({"mode": "bogus"}, "mode"),
    ({"t_final": 1.005}, "t_final"),
    ({"dt": 2.0, "t_final": 2.0}, "dt"),
    ({"output_times": [0.5, 0.1]}, "output_times"),
    ({"extra": 1}, "extra"),
    ({"kernel": {"kind": "pure", "family": "nope"}}, "kernel"),
    ({"tolerances": {"cfl": 0.9}}, "tolerances"),
    ({"seed": -1}, "seed"),
])
def test_validation_messages(tmp_path, capsys, patch, key):
    p = dump(tmp_path, {**MASS, **patch})
    assert cli.main(["validate", str(p)]) == 2
    err = capsys.readouterr().err
    assert str(p) in err and key in err
    # every line is file:line: key: message
    for line in err.strip().splitlines():
        assert line.split(":")[1].strip().isdigit()


def test_validation_points_to_line(tmp_path, capsys):
    p = dump(tmp_path, {**MASS, "t_final": 1.005})
    cli.main(["validate", str(p)])
    lineno = int(capsys.readouterr().err.split(":")[1])
    assert '"t_final"' in p.read_text().splitlines()[lineno - 1]


def test_incompatible_spectral_bounded(capsys):
    assert cli.main(["validate", str(CONFIGS / "invalid_spectral_bounded.json")]) == 2
    assert "kernel" in capsys.readouterr().err


def test_malformed_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "mode": "mass",\n  oops\n}')
    assert cli.main(["validate", str(p)]) == 2
    assert f"{p}:3:" in capsys.readouterr().err


def test_missing_file_is_io_error(tmp_path):
    assert cli.main(["validate", str(tmp_path / "none.json")]) == 4
    assert cli.main(["run", str(tmp_path / "none.json")]) == 4


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["run", str(dump(tmp_path, MASS)), "--out", str(blocker / "sub")]) == 4


def test_solver_guard_exit_code(tmp_path, monkeypatch):
    def boom(cfg, out):
        raise SolverGuardError("CFL violated")

    monkeypatch.setitem(cli.RUNNERS, "mass", boom)
    assert cli.main(["run", str(dump(tmp_path, MASS)), "--out", str(tmp_path / "o")]) == 3


def test_exit_code_mapping():
    assert cli._exit_code(SolverGuardError()) == 3
    assert cli._exit_code(ArtifactIOError()) == 4
    assert cli._exit_code(ConfigurationError()) == 2
    assert cli._exit_code(KeyError()) is None


def test_run_mass_artifacts(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["run", str(dump(tmp_path, MASS)), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"] == MASS and "numpy" in man["versions"]
    for f in man["files"]:
        assert (out / f).is_file()
    v = read_columns(out / "velocity" / "v_t0p5.csv", ("m", "v"))
    assert v["m"].size == 32
    M = read_columns(out / "mass" / "M_t1.csv", ("x", "M", "rho"))
    assert np.all(np.diff(M["M"]) >= 0) and M["M"].size == 50
    rep = json.loads((out / "report.json").read_text())
    assert rep["c_phi"] == pytest.approx(1.0, rel=1e-6) and rep["max_ratio"] == pytest.approx(1.0, abs=1e-6)


def test_run_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["run", str(dump(tmp_path, MASS, "small.json"))]) == 0
    assert (tmp_path / "small_out" / "report.json").is_file()


def test_run_is_deterministic(tmp_path):
    p = dump(tmp_path, MASS)
    cli.main(["run", str(p), "--out", str(tmp_path / "a")])
    cli.main(["run", str(p), "--out", str(tmp_path / "b")])
    files_a = sorted(f.relative_to(tmp_path / "a") for f in (tmp_path / "a").rglob("*") if f.is_file())
    files_b = sorted(f.relative_to(tmp_path / "b") for f in (tmp_path / "b").rglob("*") if f.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("mode,extra", [
    ("spectral", {"kernel": {"kind": "pure", "family": "power_law", "params": {"s": 0.75}},
                  "velocity": {"family": "random_modes", "params": {"n_modes": 4}}, "seed": 3,
                  "resolution": {"N": 64}, "rho0": None}),
    ("lagrangian", {"velocity": {"family": "linear", "params": {"slope": -0.5}, "variable": "x"},
                    "resolution": {"P": 40}}),
])
def test_other_modes_run(tmp_path, mode, extra):
    data = {**MASS, "mode": mode, **extra}
    data = {k: v for k, v in data.items() if v is not None}
    out = tmp_path / "o"
    assert cli.main(["run", str(dump(tmp_path, data)), "--out", str(out)]) == 0
    assert (out / "report.json").is_file()


def test_lagrangian_blowup_reported(tmp_path):
    data = {**MASS, "mode": "lagrangian", "t_final": 2.0,
            "kernel": {**MASS["kernel"], "radial": True}, "lagrangian": {"radial": True},
            "velocity": {"family": "linear", "params": {"slope": -2.0, "intercept": 1.0}, "variable": "x"},
            "resolution": {"P": 50}, "output_times": [0.0]}
    out = tmp_path / "o"
    assert cli.main(["run", str(dump(tmp_path, data)), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["classical"] is False
    flags = json.loads((out / "manifest.json").read_text())["flags"]
    assert flags["blowup"]["t"] == pytest.approx(np.log(2), abs=2e-2)


def test_sweep(tmp_path):
    data = {**MASS, "mode": "sweep", "t_final": 6.0, "output_times": [0.0, 6.0],
            "sweep": {"mode": "mass", "grid": {"kernel.params.value": [1.0, 2.0]}}}
    out = tmp_path / "s"
    assert cli.main(["sweep", str(dump(tmp_path, data)), "--out", str(out)]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("point,kernel.params.value,status")
    rates = [float(l.split(",")[4]) for l in lines[1:]]
    # energy rate 2 * value for the constant protocol
    assert rates == pytest.approx([2.0, 4.0], rel=1e-4)
    assert (out / "point_001" / "report.json").is_file()


def test_sweep_command_needs_sweep_mode(tmp_path):
    assert cli.main(["sweep", str(dump(tmp_path, MASS))]) == 2


def test_expand_sweep_order():
    data = {"mode": "sweep", "a": {"x": 0}, "sweep": {"mode": "mass", "grid": {"b": [1, 2], "a.x": [3, 4]}}}
    pts = cf.expand_sweep(data)
    assert [(p["a"]["x"], p["b"]) for p in pts] == [(3, 1), (3, 2), (4, 1), (4, 2)]


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "topoflock.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout


def test_io_roundtrip_cdf_with_atoms(tmp_path):
    prof = MassProfile(np.array([0.0, 1.0]), np.array([0.0, 0.6]), ((0.5, 0.4),))
    p = write_cdf_csv(tmp_path / "m.csv", prof)
    back = read_cdf_csv(p)
    x = np.linspace(-0.5, 1.5, 41)
    assert np.allclose(cdf_eval(back, x), cdf_eval(prof, x), atol=1e-15)
    assert back.atoms == prof.atoms


def test_io_density_and_errors(tmp_path):
    x = np.linspace(0, 2, 5)
    write_csv(tmp_path / "d.csv", ["x", "rho"], [x, np.full(5, 0.5)])
    prof = read_density_csv(tmp_path / "d.csv")
    assert float(cdf_eval(prof, 1.0)) == pytest.approx(0.5)
    (tmp_path / "bad.csv").write_text("x,rho\n0,1,2\n")
    with pytest.raises(ConfigurationError):
        read_columns(tmp_path / "bad.csv")
    with pytest.raises(ArtifactIOError):
        read_columns(tmp_path / "missing.csv")
    with pytest.raises(ConfigurationError):
        write_csv(tmp_path / "e.csv", ["a", "b"], [[1, 2], [1]])


def test_write_json_nan_and_sorted(tmp_path):
    write_json(tmp_path / "r.json", {"b": np.nan, "a": np.int64(3), "c": np.array([1.5])})
    text = (tmp_path / "r.json").read_text()
    assert json.loads(text) == {"a": 3, "b": None, "c": [1.5]}
    assert text.index('"a"') < text.index('"b"')
