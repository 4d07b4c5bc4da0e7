import dataclasses
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from perfhom.cli import main
from perfhom.config import CacheKey, ConfigError, RunConfig, load_config, parse_config
from perfhom.pipeline import run_verify

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
[cell]
target_h = 1/8
[hole.1]
center = 0.5, 0.5
radius = 0.25
phase = 1
[coefficient]
name = identity
[phase.1]
kind = linear
a = 1
[data]
f = const 1
g1 = zero
g2 = zero
"""


def test_defaults_match_builtin():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.sweep == (2, 4, 8, 16) and cfg.hom_n() == 512
    assert dataclasses.replace(load_config(CONFIGS / "default.ini"), out="out") == RunConfig()


@pytest.mark.parametrize("name", ["default", "layered", "identity", "zero_data", "small"])
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / f"{name}.ini")
    assert cfg.build_coefficient().check() == []


@pytest.mark.parametrize("text, line, fragment", [
    ("[cell]\ntarget_h = fast\n", 2, "expected a number"),
    ("[cell]\ntarget_h = 0.1\n\n[bogus]\nx = 1\n", 4, "unknown section"),
    ("[coefficient]\nname = marble\n", 2, "unknown coefficient"),
    ("[coefficient]\nname = identity\nbase = 3\n", 3, "not used"),
    ("[phase.1]\nkind = soft-sine\nc1 = 2\nc2 = 1\n", 2, "0 < c1 <= c2"),
    ("[hole.1]\ncenter = 0.5, 0.9\nradius = 0.15\n", 1, "boundary contact"),
    ("[hole.1]\ncenter = 0.5\nradius = 0.15\n", 2, "expected 2 numbers"),
    ("[sweep]\nn = 2 4 -8\n", 2, "positive integers"),
    ("[sweep]\nn = 2 4 4\n", 2, "duplicate"),
    ("[sweep]\nhom_h = 0.3\n", 2, "1/n"),
    ("[data]\nf = sinsin 1 2\n", 2, "at most 1"),
    ("[data]\ng1 = cosh\n", 2, "unknown data"),
    ("[solver]\nnewton_tol = -1\n", 2, "positive"),
    ("[acceptance]\nh1_window = 1.1 0.4\n", 2, "exceeds"),
    ("[phase.3]\nkind = linear\n", 1, "only phase.1 and phase.2"),
])
def test_config_errors_name_the_line(text, line, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "run.ini")
    msg = str(err.value)
    assert msg.startswith(f"run.ini:{line}:"), msg
    assert fragment in msg


def test_fractions_and_lists():
    cfg = parse_config("[cell]\ntarget_h = 1/32\n[sweep]\nn = 2, 4 8\nhom_h = 1/128\n")
    assert cfg.cell_h == 1 / 32 and cfg.sweep == (2, 4, 8) and cfg.hom_n() == 128


def test_cache_key_sensitivity():
    base = RunConfig()
    assert CacheKey.of(base).digest == CacheKey.of(parse_config("")).digest
    for text in ("[cell]\ntarget_h = 1/32\n", "[cell]\nsegments = 65\n", "[coefficient]\nname = layered\n",
                 "[hole.1]\ncenter = 0.3, 0.3\nradius = 0.2001\n"):
        assert CacheKey.of(parse_config(text)).digest != CacheKey.of(base).digest
    # solver and data settings do not affect the cell solution
    assert CacheKey.of(parse_config("[data]\nf = zero\n[sweep]\nn = 2\n")).digest == CacheKey.of(base).digest


@given(h=st.integers(4, 64), seg=st.integers(8, 256))
def test_cache_key_is_injective_on_mesh_parameters(h, seg):
    a = parse_config(f"[cell]\ntarget_h = 1/{h}\nsegments = {seg}\n")
    b = parse_config(f"[cell]\ntarget_h = 1/{h + 1}\nsegments = {seg}\n")
    assert CacheKey.of(a).digest != CacheKey.of(b).digest


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["cell", "--config", _write(tmp_path, "[coefficient]\nname = nope\n"), "--out", out]) == 3
    assert main(["cell", "--config", str(tmp_path / "missing.ini"), "--out", out]) == 3
    assert main(["fine", "--eps", "0.3", "--out", out]) == 3
    assert main(["sweep", "--threads", "0", "--out", out]) == 3
    assert main(["frobnicate"]) == 3
    bad_newton = _write(tmp_path, SMALL + "[solver]\nmax_newton = 1\nnewton_tol = 1e-30\n", "b.ini")
    assert main(["fine", "--eps", "1/2", "--config", bad_newton, "--out", out, "--cache", "none"]) == 2
    assert "solver failure" in capsys.readouterr().err


def test_cli_cell_identity_and_cache(tmp_path, capsys):
    cfg = _write(tmp_path, "[cell]\ntarget_h = 1/32\n[coefficient]\nname = identity\n")
    args = ["cell", "--config", cfg, "--out", str(tmp_path / "o"), "--cache", str(tmp_path / "c")]
    assert main(args) == 0
    first = (tmp_path / "o" / "tensor.txt").read_text()
    assert main(args) == 0
    second = (tmp_path / "o" / "tensor.txt").read_text()
    capsys.readouterr()
    assert "cache_hit = false" in first and "cache_hit = true" in second
    strip = lambda s: [l for l in s.splitlines() if not l.startswith("cache_hit")]
    assert strip(first) == strip(second)
    vals = [float(v) for v in next(l for l in first.splitlines() if l.startswith("a_hat =")).split("=")[1].split(",")]
    assert np.allclose(vals, [1, 0, 0, 1], atol=1e-8)


def test_cli_cell_layered(tmp_path, capsys):
    assert main(["cell", "--config", str(CONFIGS / "layered.ini"), "--out", str(tmp_path), "--cache", "none"]) == 0
    text = (tmp_path / "tensor.txt").read_text()
    capsys.readouterr()
    vals = [float(v) for v in next(l for l in text.splitlines() if l.startswith("a_hat =")).split("=")[1].split(",")]
    assert np.allclose(vals, [3 ** 0.5, 0, 0, 2], atol=5e-3)


def test_cli_fine_and_hom_write_outputs(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["fine", "--eps", "1/2", "--config", cfg, "--out", str(out), "--cache", "none"]) == 0
    assert main(["hom", "--config", cfg, "--out", str(out), "--cache", "none"]) == 0
    capsys.readouterr()
    for name in ("fine_N2.field.txt", "fine_N2.mesh.txt", "fine_N2.meta.txt", "hom.field.txt", "hom.meta.txt"):
        assert (out / name).stat().st_size > 0
    assert "newton_iters = 1" in (out / "fine_N2.meta.txt").read_text()


def test_cli_zero_data_sweep(tmp_path, capsys):
    out = tmp_path / "z"
    code = main(["sweep", "--config", str(CONFIGS / "zero_data.ini"), "--out", str(out), "--cache", "none"])
    text = capsys.readouterr().out
    assert code == 0
    assert "rate err_h1: undefined" in text and "rate energy_gap: undefined" in text
    rows = (out / "sweep.csv").read_text().splitlines()[1:]
    assert len(rows) == 3
    for row in rows:
        vals = row.split(",")
        assert [float(v) for v in vals[2:8]] == [0.0] * 6 and vals[-1] == ""


def test_cli_single_eps_sweep(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL + "[sweep]\nn = 2\n")
    out = tmp_path / "s"
    assert main(["sweep", "--config", cfg, "--out", str(out), "--cache", "none"]) == 0
    assert "fewer than 3 sweep points" in capsys.readouterr().out
    assert len((out / "sweep.csv").read_text().splitlines()) == 2
    assert "rate." not in (out / "sweep_summary.txt").read_text()
    assert (out / "sweep.svg").read_text().lstrip().startswith("<?xml")


def test_cli_report_refits(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL + "[sweep]\nn = 2 4 8\nhom_h = 1/64\n")
    out = str(tmp_path / "r")
    assert main(["report", "--config", cfg, "--out", out]) == 3
    main(["sweep", "--config", cfg, "--out", out, "--cache", "none"])
    capsys.readouterr()
    main(["report", "--config", cfg, "--out", out])
    summary = Path(out, "report_summary.txt").read_text()
    assert "rate.err_h1 = " in summary


def test_verify_bundle_and_fault_injection(tmp_path):
    cfg = parse_config(SMALL + "[sweep]\nn = 2 4\n")
    checks = {c.name: c for c in run_verify(cfg, None)}
    assert checks["compatibility of auxiliary problem 1"].status == "pass"
    assert checks["compatibility of auxiliary problem 2"].status == "skip"
    assert checks["trace identity, phase 2"].status == "skip"
    assert all(c.status != "fail" for c in checks.values())
    bad = {c.name: c for c in run_verify(cfg, None, q_override={1: 3.0})}
    assert bad["compatibility of auxiliary problem 1"].status == "fail"


def test_verify_no_hole_skips_trace_checks(tmp_path, capsys):
    cfg = _write(tmp_path, "[cell]\ntarget_h = 1/8\n[sweep]\nn = 2 4\n")
    assert main(["verify", "--config", cfg, "--out", str(tmp_path), "--cache", "none"]) == 0
    text = (tmp_path / "verify.txt").read_text()
    capsys.readouterr()
    assert "SKIP trace identity, phase 1" in text and "FAIL" not in text
