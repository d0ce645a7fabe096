import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anderson_lab import io as aio
from anderson_lab.cli import ConfigError, load_config, main

GOLDEN = "[grid]\nd = 1\nN = 64\n\n[run]\nseed = 1\nm = 5\n"


def write_cfg(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# -- emitters ----------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=3, max_size=3),
                min_size=1, max_size=10))
def test_csv_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "x.csv"
    aio.write_csv(path, ["a", "b", "c"], rows)
    header, back = aio.read_csv(path)
    assert header == ["a", "b", "c"]
    assert back == [[float(v) for v in r] for r in rows]


def test_pgm_checkerboard(tmp_path):
    from anderson_lab.field import GridField, TorusGrid
    from anderson_lab.nodal import nodal_domains

    g = TorusGrid(2, 64)
    x, y = g.coords
    u = np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    labels = nodal_domains(GridField(g, u), 1e-3).labels
    aio.write_pgm(tmp_path / "c.pgm", labels)
    img = aio.read_pgm(tmp_path / "c.pgm")
    assert np.array_equal(img, labels)
    levels = set(np.unique(img)) - {0}
    assert len(levels) == 4


@pytest.mark.parametrize("shape", [(64,), (32, 32)])
def test_raw_sidecar(tmp_path, shape):
    arr = np.random.default_rng(0).standard_normal(shape)
    path, side = aio.write_raw(tmp_path / "a.f64", arr)
    meta = json.loads(side.read_text())
    assert meta["shape"] == list(shape)
    assert path.stat().st_size == meta["bytes"] == int(np.prod(shape)) * 8
    assert np.array_equal(aio.read_raw(path), arr)


def test_json_non_finite(tmp_path):
    aio.write_json(tmp_path / "a.json", {"x": np.float64(np.inf), "y": np.arange(3)})
    assert aio.read_json(tmp_path / "a.json") == {"x": "inf", "y": [0, 1, 2]}


# -- configuration ---------------------------------------------------------------------

def test_config_defaults_and_keys(tmp_path):
    cfg = load_config(write_cfg(tmp_path, GOLDEN + "[control]\nomega = 0.1, 0.3\n"), "spectrum")
    assert (cfg.d, cfg.N, cfg.m, cfg.seed) == (1, 64, 5, 1)
    assert tuple(cfg.omega) == (0.1, 0.3)
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, "[grid]\nbogus = 1\n"), "spectrum")
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, "[grid]\nN = many\n"), "spectrum")


@pytest.mark.parametrize("text,sub", [
    ("[grid]\nd = 3\n", "spectrum"),
    ("[grid]\nN = 48\n", "spectrum"),
    ("[grid]\nd = 1\nN = 16\n[run]\nm = 5\n", "spectrum"),
    ("[grid]\nd = 1\n", "qc"),
    ("[grid]\nd = 2\nN = 64\n", "control"),
])
def test_invalid_configs_exit_2(tmp_path, capsys, text, sub):
    assert main([sub, "--config", write_cfg(tmp_path, text), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("anderson-lab: error:") and "\n" not in err
    assert not (tmp_path / "o").exists()


def test_unknown_subcommand():
    proc = subprocess.run([sys.executable, "-m", "anderson_lab", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage" in proc.stderr


# -- runs -----------------------------------------------------------------------------------

def test_golden_spectrum_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, GOLDEN)
    for name in ("a", "b"):
        assert main(["spectrum", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "eigenvalues.csv").read_bytes()
    assert a == (tmp_path / "b" / "eigenvalues.csv").read_bytes()
    header, rows = aio.read_csv(tmp_path / "a" / "eigenvalues.csv")
    assert header == ["index", "lambda", "residual"] and len(rows) == 5
    ma = aio.read_json(tmp_path / "a" / "manifest.json")
    mb = aio.read_json(tmp_path / "b" / "manifest.json")
    assert ma["artifacts"] == mb["artifacts"]
    assert ma["status"] == "ok"
    for rel, digest in ma["artifacts"].items():
        assert aio.sha256(tmp_path / "a" / rel) == digest
    assert ma["constants"]["constants_version"]
    assert ma["config"]["m"] == 5


def test_failure_still_writes_manifest(tmp_path, capsys):
    cfg = write_cfg(tmp_path, GOLDEN + "tol = 1e-30\n")
    assert main(["spectrum", "--config", cfg, "--out", str(tmp_path / "f")]) == 1
    man = aio.read_json(tmp_path / "f" / "manifest.json")
    assert man["status"] == "failed"
    assert man["failure"]["stage"] == "eigensolve"
    assert "EigenSolverError" in man["failure"]["error"]
    assert "failed" in capsys.readouterr().err


def test_out_dir_precedence(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, GOLDEN)
    monkeypatch.setenv("ANDERSON_LAB_OUT", str(tmp_path / "env"))
    assert main(["spectrum", "--config", cfg]) == 0
    assert (tmp_path / "env" / "manifest.json").exists()
    assert main(["spectrum", "--config", cfg, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "manifest.json").exists()


def test_seed_override_and_noise_artifacts(tmp_path):
    cfg = write_cfg(tmp_path, GOLDEN)
    assert main(["noise", "--config", cfg, "--out", str(tmp_path / "s1")]) == 0
    assert main(["noise", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "s2")]) == 0
    a = aio.read_raw(tmp_path / "s1" / "xi.f64")
    b = aio.read_raw(tmp_path / "s2" / "xi.f64")
    assert a.shape == (64,) and not np.array_equal(a, b)
    assert aio.read_json(tmp_path / "s2" / "xi.f64.json")["seed"] == 2


def test_report(tmp_path, capsys):
    cfg = write_cfg(tmp_path, GOLDEN)
    out = tmp_path / "r"
    assert main(["spectrum", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "status=ok" in text and "BAD" not in text
    (out / "eigenvalues.csv").write_text("tampered\n")
    main(["report", "--out", str(out)])
    assert "BAD eigenvalues.csv" in capsys.readouterr().out
    assert main(["report", "--out", str(tmp_path / "missing")]) == 2


def test_control_subcommand(tmp_path):
    cfg = write_cfg(tmp_path, "[grid]\nd = 1\nN = 256\n[run]\nm = 20\n")
    assert main(["control", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    man = aio.read_json(tmp_path / "c" / "manifest.json")
    assert all(man["checks"].values())
    header, rows = aio.read_csv(tmp_path / "c" / "trajectory.csv")
    assert len(rows) > 1


def test_config_inline_comments(tmp_path):
    text = "[grid]\nd = 1   ; dimension\nN = 128 # cells\neps = auto\n[verify]\ncriteria = 1, 2, 5\n"
    cfg = load_config(write_cfg(tmp_path, text), "verify")
    assert (cfg.d, cfg.N, cfg.eps, cfg.criteria) == (1, 128, None, (1, 2, 5))
