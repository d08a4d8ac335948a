import os
from pathlib import Path

import pytest

from halfplane_ns.core import ValidationError
from halfplane_ns.xharness import cli, criteria
from halfplane_ns.xharness.config import (EXPERIMENTS, ConfigError, config_text, default_config,
                                          parse_config, run_id, sweep_params)
from halfplane_ns.xharness.experiments import read_kv, run_experiment

TINY = """\
[experiment]
name = density_bound_sweep
t_end = 0.2
sample_every = 0.05
nu_list = 50, 100, 200
[grid]
lx = 1
ly = 1
nx = 16
ny = 8
[stepper]
checkpoint_every = 0.05
"""


def _tree(root: Path):
    """Relative path -> bytes for every artifact except the timing log."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run.log":
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


# --- config -----------------------------------------------------------------------

def test_minimal_config_fills_defaults():
    cfg = parse_config("[experiment]\nname = mms_convergence\n")
    assert cfg == default_config("mms_convergence")
    assert cfg.verdicts == ("C3",)


def test_negative_lambda_rejected_with_line():
    text = "[experiment]\nname = mms_convergence\n[params]\nmu = 1\nlambda = -5\n"
    with pytest.raises(ConfigError, match="physical restriction") as ei:
        parse_config(text)
    assert ei.value.line == 5
    assert "line 5" in str(ei.value)


def test_duplicate_key():
    text = "[experiment]\nname = mms_convergence\nt_end = 1\nt_end = 2\n"
    with pytest.raises(ConfigError, match="duplicate key at line 4"):
        parse_config(text)


def test_unknown_key_is_error():
    with pytest.raises(ConfigError, match="t_ned"):
        parse_config("[experiment]\nname = mms_convergence\nt_ned = 1\n")


def test_unknown_experiment_and_section():
    with pytest.raises(ConfigError, match="unknown experiment"):
        parse_config("[experiment]\nname = nope\n")
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nname = mms_convergence\n[extras]\nx = 1\n")


def test_bad_values():
    base = "[experiment]\nname = nu_sweep_limit\n"
    for extra in ("nu_list = 100, 50\n", "t_end = -1\n", "fit_window = 2, 1\n",
                  "verdicts = C99\n"):
        with pytest.raises(ConfigError):
            parse_config(base + extra)
    with pytest.raises(ConfigError, match="line"):
        parse_config(base + "[grid]\nlx = 1\nly = 1\nnx = 16\nny = 16\n")


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_config_round_trip(name):
    cfg = default_config(name)
    assert parse_config(config_text(cfg)) == cfg


def test_run_id_ignores_out_dir():
    cfg = parse_config(TINY)
    other = parse_config(TINY + "")
    assert run_id(cfg) == run_id(other)
    moved = parse_config(TINY.replace("[grid]", "out_dir = elsewhere\n[grid]"))
    assert run_id(moved) == run_id(cfg)
    assert run_id(parse_config(TINY.replace("t_end = 0.2", "t_end = 0.3"))) != run_id(cfg)


def test_sweep_params_keep_mu():
    base = default_config("density_bound_sweep").params
    p = sweep_params(base, 100.0)
    assert p.mu == base.mu and p.nu == 100.0 and p.lam == 100.0 - 2 * base.mu
    with pytest.raises(ValidationError):
        sweep_params(base, 0.5 * base.mu)


def test_criteria_table_is_versioned():
    lines = criteria.table_lines()
    assert lines[0] == f"criteria.version = {criteria.CRITERIA_VERSION}"
    assert set(criteria.CRITERIA) == {f"C{k}" for k in range(1, 12)}


# --- CLI --------------------------------------------------------------------------

def test_cli_list(capsys):
    assert cli.main(["list"]) == 0
    assert capsys.readouterr().out.split() == list(EXPERIMENTS)
    assert len(EXPERIMENTS) == 7


def test_cli_describe(capsys):
    assert cli.main(["describe", "vacuum_decay"]) == 0
    out = capsys.readouterr().out
    assert "verdict C7" in out and "[experiment]" in out
    assert cli.main(["describe", "nope"]) == 2


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nname = mms_convergence\n[params]\nlambda = -5\n")
    assert cli.main(["run", str(bad)]) == 2
    assert "line 4" in capsys.readouterr().err
    ok = tmp_path / "ok.ini"
    ok.write_text(TINY)
    assert cli.main(["run", str(ok), "--threads", "0"]) == 2


def test_cli_run_pass_and_fail(tmp_path, capsys):
    ok = tmp_path / "ok.ini"
    ok.write_text(TINY)
    assert cli.main(["run", str(ok), "--out", str(tmp_path / "o")]) == 0
    assert "C5: PASS" in capsys.readouterr().out
    starved = tmp_path / "starved.ini"
    starved.write_text(TINY + "wall_budget = 1e-9\n")
    assert cli.main(["run", str(starved), "--out", str(tmp_path / "o")]) == 1
    out = capsys.readouterr().out
    assert "C5: FAIL" in out and "--resume" in out


# --- runs -------------------------------------------------------------------------

def test_artifacts(tmp_path):
    cfg = parse_config(TINY)
    status, rdir, res = run_experiment(cfg, out=str(tmp_path))
    assert status == 0 and res.passed
    assert (rdir / "config.echo").read_text() == config_text(cfg)
    summary = read_kv(rdir / "summary.kv")
    assert summary["criteria.version"] == criteria.CRITERIA_VERSION
    assert summary["run_id"] == run_id(cfg) == rdir.name
    assert read_kv(rdir / "verdicts.kv") == {"C5": "pass"}
    for nu in ("50", "100", "200"):
        assert (rdir / "members" / f"nu_{nu}" / "series.csv").exists()


def test_identical_runs_identical_bytes(tmp_path):
    cfg = parse_config(TINY)
    _, a, _ = run_experiment(cfg, out=str(tmp_path / "a"))
    _, b, _ = run_experiment(cfg, out=str(tmp_path / "b"), threads=3)
    ta, tb = _tree(a), _tree(b)
    assert ta.keys() == tb.keys() and ta == tb


def test_sweep_order_independent(tmp_path):
    """A member's series does not depend on which other members are swept."""
    full = parse_config(TINY)
    solo = parse_config(TINY.replace("nu_list = 50, 100, 200", "nu_list = 100"))
    _, a, _ = run_experiment(full, out=str(tmp_path / "a"))
    _, b, _ = run_experiment(solo, out=str(tmp_path / "b"))
    m = Path("members") / "nu_100" / "series.csv"
    assert (a / m).read_bytes() == (b / m).read_bytes()


def test_resume_mid_sweep(tmp_path):
    cfg = parse_config(TINY)
    _, straight, _ = run_experiment(cfg, out=str(tmp_path / "straight"))
    _, rdir, _ = run_experiment(cfg, out=str(tmp_path / "cut"))
    # simulate an interruption: nu = 200 stopped after its t = 0.1 checkpoint,
    # leaving later series rows and checkpoints behind it
    m200 = rdir / "members" / "nu_200"
    (m200 / "result.kv").unlink()
    (m200 / "checkpoints" / "ck_t000000.150000000.bin").unlink()
    for f in ("summary.kv", "verdicts.kv"):
        (rdir / f).unlink()
    done = rdir / "members" / "nu_50" / "series.csv"
    stamp = done.stat().st_mtime_ns
    os.utime(done, ns=(stamp - 10 ** 9, stamp - 10 ** 9))
    stamp = done.stat().st_mtime_ns
    status, rdir2, _ = run_experiment(cfg, out=str(tmp_path / "cut"), resume=str(rdir))
    assert status == 0 and rdir2 == rdir
    assert done.stat().st_mtime_ns == stamp          # finished member untouched
    assert _tree(rdir) == _tree(straight)


def test_resume_from_named_checkpoint(tmp_path):
    cfg = parse_config(TINY)
    _, straight, _ = run_experiment(cfg, out=str(tmp_path / "straight"))
    _, rdir, _ = run_experiment(cfg, out=str(tmp_path / "cut"))
    m100 = rdir / "members" / "nu_100"
    (m100 / "result.kv").unlink()
    ck = m100 / "checkpoints" / "ck_t000000.050000000.bin"
    run_experiment(cfg, out=str(tmp_path / "cut"), resume=str(ck))
    assert _tree(rdir) == _tree(straight)


def test_resume_refuses_other_config(tmp_path):
    cfg = parse_config(TINY)
    _, rdir, _ = run_experiment(cfg, out=str(tmp_path))
    with pytest.raises(ValidationError):
        run_experiment(cfg, out=str(tmp_path), resume=str(tmp_path / "elsewhere"))
    (rdir / "config.echo").write_text("tampered\n")
    with pytest.raises(ValidationError, match="refusing"):
        run_experiment(cfg, out=str(tmp_path), resume=str(rdir))


def test_budget_failure_leaves_resumable_checkpoint(tmp_path):
    starved = parse_config(TINY + "wall_budget = 1e-9\n")
    status, rdir, res = run_experiment(starved, out=str(tmp_path))
    assert status == 1 and not res.passed
    assert any("--resume" in f for f in res.failures)
    cks = list((rdir / "members").rglob("ck_t*.bin"))
    assert cks
