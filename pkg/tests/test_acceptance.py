"""Acceptance suite: the eleven criteria at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL ...`` line (visible without
``-s``).  Experiment runs are shared through session fixtures, so the vacuum
run feeds criteria 7 and 8 and the reflection suite feeds criteria 1 and 2.
Thresholds come from the criteria table that the harness itself uses.
"""

import os
import time

import numpy as np
import pytest

from halfplane_ns import store
from halfplane_ns.xharness import criteria as crit
from halfplane_ns.xharness.config import default_config, with_overrides
from halfplane_ns.xharness.experiments import read_kv, run_experiment

pytestmark = pytest.mark.slow

THREADS = max(1, min(4, os.cpu_count() or 1))


class Run:
    def __init__(self, cfg, tmp):
        t0 = time.monotonic()
        self.status, self.dir, self.result = run_experiment(cfg, out=str(tmp), threads=THREADS)
        self.seconds = time.monotonic() - t0
        self.summary = read_kv(self.dir / "summary.kv")

    def floats(self, key):
        return [float(x) for x in self.summary[key].split(",")]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    cache = {}

    def get(name, **sections):
        key = (name, repr(sorted(sections.items())))
        if key not in cache:
            cfg = default_config(name, **sections) if sections else default_config(name)
            cache[key] = Run(cfg, tmp_path_factory.mktemp(name))
        return cache[key]

    return get


@pytest.fixture
def report(capsys):
    def emit(cid, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def test_c1_reflection_identities(runs, report):
    r = runs("reflection_unit")
    err = float(r.summary["identity_err_max"])
    gap = float(r.summary["fft_cg_gap"])
    n = int(r.summary["n_fields"])
    ok = (n == crit.threshold("C1", "n_fields") and err <= crit.threshold("C1", "identity_tol")
          and gap <= crit.threshold("C1", "solver_agreement_tol") and r.seconds < 5.0)
    report(1, ok, f"{n} fields, max |ratio - 2| {err:.2e}, fft/cg gap {gap:.2e}, {r.seconds:.1f} s")
    assert ok


def test_c2_neumann_order(runs, report):
    r = runs("reflection_unit")
    ratios = r.floats("neumann_ratios")
    lo, hi = crit.threshold("C2", "ratio_lo"), crit.threshold("C2", "ratio_hi")
    grids = tuple(int(g) for g in r.summary["neumann_grids"].split(","))
    ok = grids == crit.threshold("C2", "grids") and all(lo <= q <= hi for q in ratios) and r.seconds < 60
    report(2, ok, f"grids {grids}, error ratios {', '.join(f'{q:.3f}' for q in ratios)}")
    assert ok


def test_c3_mms_order(runs, report):
    r = runs("mms_convergence")
    orders = r.floats("orders")
    ok = len(r.floats("errors")) == 3 and min(orders) >= crit.threshold("C3", "min_order") and r.seconds < 300
    report(3, ok, f"orders {', '.join(f'{q:.3f}' for q in orders)}, {r.seconds:.0f} s")
    assert ok


def _c4_run(runs):
    # 128 x 128 cells: a [-4, 4] x [0, 8] box at h = 1/16
    return runs("vacuum_decay", experiment={"t_end": 10.0, "fit_window": (1.0, 10.0),
                                            "verdicts": ("C4",)},
                grid={"lx": 4.0, "ly": 8.0, "nx": 128, "ny": 128})


def test_c4_mass_and_energy(runs, report):
    r = _c4_run(runs)
    drift = float(r.summary["mass_drift_rel"])
    rise = float(r.summary["energy_rise_rate_rel"])
    ok = (drift <= crit.threshold("C4", "mass_drift_rel")
          and rise <= crit.threshold("C4", "energy_rise_rate") and r.seconds < 600)
    report(4, ok, f"mass drift {drift:.2e}, energy rise {rise:.2e} E0 per unit time, {r.seconds:.0f} s")
    assert ok


def test_c5_density_bound(runs, report):
    r = runs("density_bound_sweep")
    rmax = r.floats("max_rho")
    b_all, b_top = float(r.summary["bound_all"]), float(r.summary["bound_top"])
    nus = r.floats("nu_list")
    ok = (nus == [50.0, 100.0, 200.0, 400.0] and all(m <= b_all for m in rmax)
          and rmax[-1] <= b_top and r.seconds < 1800)
    report(5, ok, f"max rho {', '.join(f'{m:.4f}' for m in rmax)}; bounds {b_all:.3f} / {b_top:.3f} "
                  f"(rho0 max {float(r.summary['rho0_max']):.4f})")
    assert ok


def test_c6_incompressible_limit(runs, report):
    r = runs("nu_sweep_limit")
    k, r2 = float(r.summary["fit.exponent"]), float(r.summary["fit.r2"])
    dist = r.floats("dist_l2_halfball_t1")
    dec = all(b < a for a, b in zip(dist, dist[1:]))
    ok = (crit.threshold("C6", "exp_lo") <= k <= crit.threshold("C6", "exp_hi")
          and r2 >= crit.threshold("C6", "min_r2") and dec and r.seconds < 2700)
    report(6, ok, f"sup div exponent {k:.3f} (r2 {r2:.4f}); distances at t=1 "
                  f"{', '.join(f'{d:.2e}' for d in dist)} ({'decreasing' if dec else 'not decreasing'})")
    assert ok


def test_c7_vacuum_decay_rates(runs, report):
    r = runs("vacuum_decay")
    g, gr2 = float(r.summary["fit.grad_u_l2.exponent"]), float(r.summary["fit.grad_u_l2.r2"])
    u, ur2 = float(r.summary["fit.sqrt_rho_udot_l2.exponent"]), float(r.summary["fit.sqrt_rho_udot_l2.r2"])
    m = crit.threshold("C7", "min_r2")
    ok = (g <= crit.threshold("C7", "grad_exp_max") and gr2 >= m
          and u <= crit.threshold("C7", "udot_exp_max") and ur2 >= m and r.seconds < 1800)
    report(7, ok, f"window {r.summary['fit_window']}: grad u {g:.3f} (r2 {gr2:.4f}), "
                  f"sqrt(rho) udot {u:.3f} (r2 {ur2:.4f}), {r.seconds:.0f} s")
    assert ok


def test_c8_mass_localization(runs, report):
    r = runs("vacuum_decay")
    ball, mom = float(r.summary["mass_ball_min"]), float(r.summary["moment_ratio_max"])
    ok = ball >= crit.threshold("C8", "ball_mass_min") and mom <= crit.threshold("C8", "moment_ratio_max")
    report(8, ok, f"min half-ball mass {ball:.4f} (N1 {float(r.summary['n1']):.4f}), "
                  f"max moment ratio {mom:.4f}")
    assert ok


def test_c9_nonvacuum_decay(runs, report):
    r = runs("nonvacuum_longtime")
    a, b = float(r.summary["rho_dev_l4.ratio"]), float(r.summary["grad_u_l2.ratio"])
    q = crit.threshold("C9", "ratio_max")
    ok = a <= q and b <= q
    report(9, ok, f"L4 density deviation ratio {a:.4f}, grad u L2 ratio {b:.4f} (t_end vs t=1)")
    assert ok


def test_c10_zlotnik_and_trace(runs, report):
    r = runs("zlotnik_suite")
    n, hyp, held = int(r.summary["cases"]), int(r.summary["hypothesis_ok"]), int(r.summary["bound_holds"])
    ratios = r.floats("trace_ratios")
    ok = (n == crit.threshold("C10", "n_cases") and held == hyp
          and min(ratios) >= crit.threshold("C10", "min_ratio")
          and r.summary["trace_truncated"] == "false")
    report(10, ok, f"{held}/{hyp} verified cases within bound ({n - hyp} hypothesis failures); "
                   f"trace refinement ratios {', '.join(f'{q:.2f}' for q in ratios)}")
    assert ok


def test_c11_determinism_and_restart(tmp_path, report):
    cfg = default_config("nonvacuum_longtime",
                         experiment={"t_end": 1.5, "sample_every": 0.25},
                         grid={"lx": 2.0, "ly": 2.0, "nx": 64, "ny": 32},
                         stepper={"checkpoint_every": 0.5})
    _, a, _ = run_experiment(cfg, out=str(tmp_path / "a"))
    _, b, _ = run_experiment(cfg, out=str(tmp_path / "b"))
    same = (a / "series.csv").read_bytes() == (b / "series.csv").read_bytes()

    # restart b from its t = 0.5 checkpoint
    (b / "result.kv").unlink()
    ck = store.checkpoint_path(b / "checkpoints", 0.5)
    run_experiment(cfg, out=str(tmp_path / "b"), resume=str(ck))
    _, _, ra = store.read_series(a / "series.csv")
    _, _, rb = store.read_series(b / "series.csv")
    cols = [c for c in ra[0] if not np.isnan(ra[0][c])]
    gap = max(abs(x[c] - y[c]) for x, y in zip(ra, rb) for c in cols if not np.isnan(x[c]))
    sa, _ = store.read_checkpoint(store.checkpoint_path(a / "checkpoints", 1.0))
    sb, _ = store.read_checkpoint(store.checkpoint_path(b / "checkpoints", 1.0))
    fgap = max(float(np.max(np.abs(x.data - y.data))) for x, y in zip((sa.rho, *sa.u), (sb.rho, *sb.u)))
    tol = crit.threshold("C11", "restart_tol")
    ok = same and len(ra) == len(rb) and gap <= tol and fgap <= tol
    report(11, ok, f"repeat run series identical: {same}; restart gap {gap:.1e} (series), "
                   f"{fgap:.1e} (fields at t=1)")
    assert ok
