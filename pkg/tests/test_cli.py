import json
import hashlib
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ribtube import cli, gridio, verify, partial_tube as pt
from ribtube.numerics import ImmersedGrid
from conftest import sheared_plane

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(*argv):
    return cli.main([str(a) for a in argv])


def records(path):
    return [l for l in Path(path).read_text().splitlines() if l.startswith("check=")]


@pytest.fixture(scope="module")
def cyclide_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("cyc")
    assert run("generate", CONFIGS / "cyclide.yaml", "--out-dir", out) == 0
    return out


# ---------------------------------------------------------------- generate

def test_generate_writes_grid_mesh_report_manifest(cyclide_out):
    names = sorted(p.name for p in cyclide_out.iterdir())
    assert names == ["cyclide.generate.manifest.json", "cyclide.generate.report",
                     "cyclide.tube.grid", "cyclide.tube.obj"]
    man = json.loads((cyclide_out / "cyclide.generate.manifest.json").read_text())
    for entry in man["files"]:
        assert entry["sha256"] == hashlib.sha256((cyclide_out / entry["path"]).read_bytes()).hexdigest()
    assert man["scenario"] == "partial-tube" and man["config_sha256"]
    assert set(man["timings_s"]) >= {"write"}
    f, kind = gridio.read_grid(cyclide_out / "cyclide.tube.grid")
    assert kind == "immersion" and f.grid.counts == (64, 64)
    assert all(l.endswith("verdict=pass") for l in records(cyclide_out / "cyclide.generate.report"))


def test_generate_is_byte_identical(cyclide_out, tmp_path):
    assert run("generate", CONFIGS / "cyclide.yaml", "--out-dir", tmp_path) == 0
    for name in ("cyclide.generate.report", "cyclide.tube.grid", "cyclide.tube.obj"):
        assert (tmp_path / name).read_bytes() == (cyclide_out / name).read_bytes(), name


def test_enneper_normalize_emits_triple_and_hypersurface(tmp_path):
    assert run("generate", CONFIGS / "enneper-normalize.yaml", "--out-dir", tmp_path) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"enneper-normalize.triple.grid", "enneper-normalize.hypersurface.grid"} <= names
    _, kind = gridio.read_grid(tmp_path / "enneper-normalize.triple.grid")
    assert kind.split()[0] == "triple"


def test_bad_resolution_is_config_error(tmp_path, capsys):
    assert run("generate", CONFIGS / "bad-resolution.yaml", "--out-dir", tmp_path) == 2
    assert "resolution" in capsys.readouterr().err


@pytest.mark.parametrize("edit", [
    lambda t: t.replace("lambda: 2 - 0.3*s", "lambda: 0.6 - s"),
    lambda t: t.replace("alpha: 1", "alpha: 3").replace("beta: sin(s)", "beta: 2*sin(s)"),
], ids=["lambda-vanishes", "constraint-violated"])
def test_construction_failure_exits_3(tmp_path, capsys, edit):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(edit((CONFIGS / "enneper-family.yaml").read_text()))
    assert run("generate", cfg, "--out-dir", tmp_path) == 3
    assert "construction failed" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["scenario: nope\nresolution: 16\n", "resolution: [\n", "- a list\n",
                                  "scenario: partial-tube\nresolution: 16\nparams: {phi: 'os.system(1)'}\n"])
def test_malformed_configs_exit_2(tmp_path, text):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert run("generate", cfg, "--out-dir", tmp_path) == 2


def test_missing_config_and_bad_flags(tmp_path):
    assert run("generate", tmp_path / "absent.yaml") == 2
    assert run("generate") == 2
    assert run("verify", CONFIGS / "cyclide.yaml", "--suite", "bogus") == 2
    assert run("generate", CONFIGS / "cyclide.yaml", "--tol-scale", "0") == 2


def test_failing_generate_checks_exit_4(tmp_path, capsys):
    assert run("generate", CONFIGS / "metric-sheared.yaml", "--out-dir", tmp_path) == 4
    assert "polar_conformal" in capsys.readouterr().err
    # the report is still written
    assert any(l.endswith("verdict=fail") for l in records(tmp_path / "metric-sheared.generate.report"))


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RIBTUBE_OUT_DIR", str(tmp_path / "env"))
    assert run("generate", CONFIGS / "metric-sphere.yaml") == 0
    assert (tmp_path / "env" / "metric-sphere.generate.report").exists()


def test_tol_scale_multiplies_c(tmp_path):
    assert run("generate", CONFIGS / "metric-sphere.yaml", "--out-dir", tmp_path, "--tol-scale", "2") == 0
    rep = (tmp_path / "metric-sphere.generate.report").read_text()
    assert "# C 20" in rep


# ---------------------------------------------------------------- verify

def test_verify_generated_cyclide_grid(cyclide_out, tmp_path):
    assert run("verify", cyclide_out / "cyclide.tube.grid", "--suite", "cor-rpt", "--out-dir", tmp_path) == 0
    assert records(tmp_path / "cyclide.cor-rpt.report")


def test_verify_sheared_plane_grid_exits_4(tmp_path, capsys):
    p = gridio.write_grid(tmp_path / "sheared.grid", sheared_plane(33))
    assert run("verify", p, "--suite", "cor-rpt", "--out-dir", tmp_path) == 4
    assert "first failing check: orthogonal_net" in capsys.readouterr().err


def test_verify_config_uses_default_suite(tmp_path):
    assert run("verify", CONFIGS / "enneper-family.yaml", "--out-dir", tmp_path) == 0
    assert (tmp_path / "enneper-family.enneper.report").exists()


def test_verify_input_errors(tmp_path, cyclide_out):
    grid = cyclide_out / "cyclide.tube.grid"
    assert run("verify", grid, "--out-dir", tmp_path) == 2
    assert run("verify", grid, CONFIGS / "cyclide.yaml", "--suite", "cor-rpt", "--out-dir", tmp_path) == 2
    bad = tmp_path / "bad.grid"
    bad.write_text("not a grid\n")
    assert run("verify", bad, "--suite", "cor-rpt", "--out-dir", tmp_path) == 2
    assert run("verify", grid, "--suite", "gauss-map", "--out-dir", tmp_path) == 2
    assert run("verify", CONFIGS / "inversion.yaml", "--out-dir", tmp_path) == 2


def test_verify_reports_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("verify", CONFIGS / "helix-tube.yaml", "--out-dir", d) == 0
    assert (a / "helix-tube.cor-rpt.report").read_bytes() == (b / "helix-tube.cor-rpt.report").read_bytes()


# ---------------------------------------------------------------- roundtrip

def test_roundtrip_cyclide(tmp_path):
    assert run("roundtrip", CONFIGS / "cyclide.yaml", "--out-dir", tmp_path) == 0
    recs = records(tmp_path / "cyclide.roundtrip.report")
    assert any(r.startswith("check=roundtrip_deviation") for r in recs)
    assert (tmp_path / "cyclide.rebuilt.grid").exists()


def test_roundtrip_classical_recovers_constant_phi(tmp_path):
    assert run("roundtrip", CONFIGS / "classical-tube.yaml", "--out-dir", tmp_path) == 0
    recs = records(tmp_path / "classical-tube.roundtrip.report")
    assert any(r.startswith("check=recovered_phi_constancy") and r.endswith("pass") for r in recs)


def test_roundtrip_from_grid_file(cyclide_out, tmp_path):
    assert run("roundtrip", cyclide_out / "cyclide.tube.grid", "--out-dir", tmp_path) == 0


def test_roundtrip_non_tube_exits_4(tmp_path, capsys):
    assert run("roundtrip", CONFIGS / "inversion.yaml", "--out-dir", tmp_path) == 4
    assert "precondition" in capsys.readouterr().err
    p = gridio.write_grid(tmp_path / "sheared.grid", sheared_plane(33))
    assert run("roundtrip", p, "--out-dir", tmp_path) == 4


def test_roundtrip_deviation_exits_5(tmp_path, monkeypatch, capsys):
    # valid tubes rebuild well inside tolerance, so the deviation is inflated
    # after a genuine reconstruction to exercise the exit status
    real = pt.reconstruct_tube

    def inflated(f, **kw):
        rec = real(f, **kw)
        rec.deviation = 1.0
        return rec
    monkeypatch.setattr(pt, "reconstruct_tube", inflated)
    assert run("roundtrip", CONFIGS / "cyclide.yaml", "--out-dir", tmp_path) == 5
    assert "deviation" in capsys.readouterr().err


# ---------------------------------------------------------------- console script

def test_console_script_runs(tmp_path):
    exe = shutil.which("ribtube")
    cmd = [exe] if exe else [sys.executable, "-m", "ribtube.cli"]
    r = subprocess.run(cmd + ["verify", str(CONFIGS / "metric-sheared.yaml"), "--out-dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 4
    assert r.stderr.startswith("error: first failing check: polar_conformal")
