"""The registered experiments and the run-directory plumbing they share.

Layout of one run::

    <out>/<experiment>/<run-id>/
        config.echo        resolved configuration (re-parses to the same config)
        series.csv         main table (time series, or one row per level / nu)
        summary.kv         key = value results plus the criteria table
        verdicts.kv        criterion id = pass | fail
        run.log            wall-clock timings (the only nondeterministic file)
        checkpoints/       single-run experiments
        members/<id>/      sweep members: series.csv, result.kv, checkpoints/

A member that finished has a ``result.kv``; ``resume`` reuses those and
restarts unfinished members from their newest checkpoint.
"""

from __future__ import annotations

import csv
import math
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import csolve, diag, isolve, reflect, store
from ..core import Field, FluidParams, State, ValidationError, make_grid, make_params
from . import criteria as crit
from .config import EXPERIMENTS, ExperimentConfig, config_text, run_id, sweep_params
from .presets import build as build_ic

DESCRIPTIONS = {
    "reflection_unit": "Reflection identities (gradient energy doubles, parity, Laplacian symmetry, "
                       "FFT/CG agreement) and second-order Neumann effective-flux solves.",
    "mms_convergence": "Compressible solver on the manufactured solution u1 = cos(x2) exp(-t), "
                       "rho = 1 over three refinements; reports the spatial order.",
    "density_bound_sweep": "Compressible runs over nu_list; per-step max density against "
                           "2(1 + rho_far + max rho0) for all and 1.5(...) for the largest nu.",
    "vacuum_decay": "Vacuum far field, long run; mass/energy budget, decay-exponent fits, "
                    "half-ball mass and linear-moment growth.",
    "nonvacuum_longtime": "Non-vacuum far field; ||rho - rho_far||_L4 and ||grad u||_L2 at t_end "
                          "relative to t = 1.",
    "nu_sweep_limit": "Compressible runs over nu_list plus one incompressible reference run; "
                      "fit of sup_t ||div u|| against nu and L2 distance on a half ball.",
    "zlotnik_suite": "Randomised comparison-lemma cases and the refinement of the density "
                     "residual along a particle path.",
}


@dataclass
class Context:
    run_dir: Path
    threads: int = 1
    resume: bool = False
    resume_from: Optional[Path] = None
    log: Callable[[str], None] = lambda msg: None


@dataclass
class ExperimentResult:
    name: str
    summary: Dict[str, Any] = field(default_factory=dict)
    verdicts: Dict[str, bool] = field(default_factory=dict)
    text: List[str] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(self.verdicts.values())


# --- small io helpers ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def write_kv(path: Path, items: Dict[str, Any], comments: Sequence[str] = ()):
    lines = [f"# {c}" for c in comments]
    lines += [f"{k} = {_fmt(v)}" for k, v in items.items()]
    store._atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_kv(path: Path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _write_table(path: Path, columns: Sequence[str], rows: Sequence[Sequence[Any]]):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns))
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _stepper_cfg(cfg: ExperimentConfig, **kw) -> csolve.StepperConfig:
    st = cfg.stepper
    args = dict(cfl=st["cfl"], visc_tol=st["visc_tol"], visc_maxit=st["visc_maxit"],
                dt_max=st["dt_max"], wall_budget=st["wall_budget"])
    args.update(kw)
    return csolve.StepperConfig(**args)


# --- time-series members -------------------------------------------------------------------

SERIES_EXTRA = ("rho_max_step",)


def _series_columns() -> List[str]:
    return diag.record_columns() + list(SERIES_EXTRA)


def _truncate_series(path: Path, t_keep: float):
    """Drop rows after ``t_keep`` (rows written past the checkpoint being resumed)."""
    if not path.exists():
        return
    cols, units, rows = store.read_series(path)
    keep = [r for r in rows if r["t"] <= t_keep + 1e-12 * max(1.0, abs(t_keep))]
    path.unlink()
    w = store.SeriesWriter(path, cols, units)
    for r in keep:
        w.append(r)


def run_member(cfg: ExperimentConfig, params: FluidParams, mdir: Path, resume: bool,
               resume_from: Optional[str] = None, solver: str = "compressible",
               keep_times: Sequence[float] = ()) -> Dict[str, str]:
    """Run one trajectory into ``mdir`` and return its ``result.kv`` contents.

    The series holds one row per sample instant, with ``t = 0`` first.
    States at ``keep_times`` are stored as ``state_<t>.bin``.
    """
    mdir = Path(mdir)
    done = mdir / "result.kv"
    if resume and done.exists():
        return read_kv(done)
    ckdir = mdir / "checkpoints"
    series = mdir / "series.csv"
    state0, _ = build_ic(cfg.ic_preset, cfg.grid, params, cfg.ic)
    start = None
    if resume:
        ck = Path(resume_from) if resume_from else store.latest_checkpoint(ckdir)
        if ck is not None and ck.exists():
            start, ckp = store.read_checkpoint(ck)
            if ckp != params or start.grid != cfg.grid:
                raise ValidationError(f"checkpoint {ck} does not belong to this configuration")
            _truncate_series(series, start.t)
    if start is None:
        # fresh start: clear only what a member owns (mdir may be the run directory)
        mdir.mkdir(parents=True, exist_ok=True)
        shutil.rmtree(ckdir, ignore_errors=True)
        for f in [series, done, *mdir.glob("state_*.bin")]:
            if f.exists():
                f.unlink()
        start = state0
    n1 = diag.calibrate_n1(state0, cfg.extra.get("n1_target", 0.25)) if params.vacuum else None
    mass_w = bool(cfg.extra.get("edge_mass_weighted", False))
    writer = store.SeriesWriter(series, _series_columns())
    step_max = [float(np.max(start.rho.data))]

    def record(state, prev):
        row = diag.sample(state, prev, params, n1=n1, edge_mass_weighted=mass_w).row()
        row["rho_max_step"] = step_max[0]
        writer.append(row)
        step_max[0] = float(np.max(state.rho.data))
        for tk in keep_times:
            if abs(state.t - tk) <= 1e-12 * max(1.0, tk):
                store.write_checkpoint(state, params, mdir / f"state_{tk:.6f}.bin")

    if start.t == 0.0 and writer.last_t < 0.0:
        record(start, None)

    if solver == "compressible":
        scfg = _stepper_cfg(cfg)

        def stepper(s, dt):
            new, rep = csolve.step(s, params, scfg, dt)
            step_max[0] = max(step_max[0], float(np.max(new.rho.data)))
            return new, rep

        dtf = None
    else:
        icfg = isolve.IConfig(dt_max=cfg.stepper["dt_max"])
        scfg = _stepper_cfg(cfg)

        def stepper(s, dt):
            new, proj = isolve.istep(s, params, dt, icfg)
            step_max[0] = max(step_max[0], float(np.max(new.rho.data)))
            return new, csolve.StepReport(dt, 1, proj.div_residual, 0.0)

        def dtf(s):
            return isolve.idt(s, icfg)

    csolve.run(start, params, scfg, cfg.t_end, cfg.sample_every, lambda s, p, r: record(s, p),
               checkpoint_every=cfg.stepper["checkpoint_every"], checkpoint_dir=ckdir,
               step_fn=stepper, dt_fn=dtf)
    res = {"nu": params.nu, "mu": params.mu, "lambda": params.lam, "solver": solver,
           "t_end": cfg.t_end}
    if n1 is not None:
        res["n1"] = n1
    write_kv(done, res)
    return read_kv(done)


def _load_series(mdir: Path):
    cols, _, rows = store.read_series(Path(mdir) / "series.csv")
    return {c: np.array([r[c] for r in rows]) for c in cols}


def _member_job(args):
    cfg, params, mdir, resume, resume_from, solver, keep = args
    try:
        return mdir, run_member(cfg, params, mdir, resume, resume_from, solver, keep), None
    except (csolve.SolverError, csolve.BudgetExceeded, ValidationError, ArithmeticError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        ck = getattr(exc, "checkpoint", None)
        if ck is not None:
            msg += f" (resume with --resume {ck})"
        return mdir, None, msg


def _run_members(ctx: Context, jobs):
    """Run member jobs, in worker processes when ``ctx.threads > 1``.

    Members never share files, so the worker count changes wall-clock only.
    """
    jobs = [(cfg, p, Path(d), ctx.resume,
             str(ctx.resume_from) if ctx.resume_from and Path(ctx.resume_from).parent.parent == Path(d)
             else None, solver, keep)
            for cfg, p, d, solver, keep in jobs]
    if ctx.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(ctx.threads, len(jobs))) as ex:
            out = list(ex.map(_member_job, jobs))
    else:
        out = [_member_job(j) for j in jobs]
    return out


def _nu_tag(nu: float) -> str:
    return f"nu_{nu:g}"


# --- 1. reflection_unit ---------------------------------------------------------------------

_PAIRS = (("cell", "even"), ("xface", "even"), ("yface", "odd"), ("node", "even"), ("node", "odd"))


def _random_field(rng, grid, loc, parity):
    modes = []
    for _ in range(3):
        a = rng.standard_normal()
        k1 = math.pi * rng.integers(1, 5) / grid.lx
        k2 = math.pi * (rng.integers(1, 5) - (0.5 if parity == "odd" else 0.0)) / grid.ly
        ph = rng.uniform(0, 2 * math.pi)
        modes.append((a, k1, k2, ph))

    def f(x1, x2):
        out = np.zeros(np.broadcast(x1, x2).shape)
        for a, k1, k2, ph in modes:
            wall = np.sin(k2 * x2) if parity == "odd" else np.cos(k2 * x2)
            out = out + a * np.cos(k1 * x1 + ph) * wall
        return out

    return Field.sample(grid, loc, f)


def _neumann_error(n: int) -> float:
    g = make_grid(1.0, 2.0, n, n)
    lx, ly = g.lx, g.ly

    def G(x1, x2):
        return np.cos(np.pi * x1 / lx) * np.cos(np.pi * x2 / ly)

    v1 = Field.sample(g, "xface", lambda x1, x2: -np.pi / lx * np.sin(np.pi * x1 / lx) * np.cos(np.pi * x2 / ly))
    v2 = Field.sample(g, "yface", lambda x1, x2: -np.pi / ly * np.cos(np.pi * x1 / lx) * np.sin(np.pi * x2 / ly))
    Gh = reflect.solve_g_neumann((v1, v2), g)
    ex = Field.sample(g, "cell", G).data
    ex = ex - ex.mean()
    return float(np.linalg.norm(Gh.data - Gh.data.mean() - ex) / np.linalg.norm(ex))


def reflection_unit(cfg: ExperimentConfig, ctx: Context) -> ExperimentResult:
    res = ExperimentResult(cfg.name)
    rng = np.random.default_rng(cfg.seed)
    n_fields = int(cfg.extra.get("n_fields", crit.threshold("C1", "n_fields")))
    rows = []
    worst_id = worst_par = worst_adj = worst_rt = 0.0
    for k in range(n_fields):
        loc, par = _PAIRS[k % len(_PAIRS)]
        n = int(rng.choice([16, 24, 32, 48]))
        grid = make_grid(1.0, 1.0, 2 * n, n)
        f = _random_field(rng, grid, loc, par)
        w = reflect.even_extend(f) if par == "even" else reflect.odd_extend(f)
        e_half = reflect.field_grad_energy(f)
        e_whole = reflect.grad_energy(w.data, grid.h, loc)
        id_err = abs(e_whole / e_half - 2.0)
        par_err = reflect.parity_defect(w)
        rt_err = float(np.max(np.abs(w.restrict().data - f.data)))
        # symmetry of the periodic Laplacian and its commutation with the mirror
        a = reflect.even_extend(_random_field(rng, grid, "cell", "even")).data
        b = rng.standard_normal(a.shape)
        La = reflect.laplacian_periodic(a, grid.h)
        Lb = reflect.laplacian_periodic(b, grid.h)
        adj = abs(np.vdot(La, b) - np.vdot(a, Lb)) / max(abs(np.vdot(La, b)), 1e-300)
        adj = max(adj, float(np.max(np.abs(La - La[:, ::-1]))) / float(np.max(np.abs(La))))
        worst_id, worst_par = max(worst_id, id_err), max(worst_par, par_err)
        worst_adj, worst_rt = max(worst_adj, adj), max(worst_rt, rt_err)
        rows.append((k, loc, par, grid.nx, grid.ny, e_half, e_whole, id_err, par_err, adj, rt_err))
    _write_table(ctx.run_dir / "series.csv",
                 ("case", "loc", "parity", "nx", "ny", "energy_half", "energy_whole",
                  "identity_err", "parity_defect", "adjoint_err", "restrict_err"), rows)

    # transform vs conjugate gradients on an even, mean-free source
    g = make_grid(1.0, 1.0, 64, 32)
    v1 = _random_field(rng, g, "xface", "even")
    v2 = _random_field(rng, g, "yface", "odd")
    div = reflect.whole_divergence(reflect.vector_extend((v1, v2)))
    pf = reflect.poisson_whole(div, "fft").data
    pc = reflect.poisson_whole(div, "cg").data
    solver_gap = float(np.max(np.abs(pf - pc)) / np.max(np.abs(pf)))

    grids = tuple(int(n) for n in cfg.extra.get("neumann_grids", crit.threshold("C2", "grids")))
    errs = [_neumann_error(n) for n in grids]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]

    tol = crit.threshold("C1", "identity_tol")
    res.summary.update({
        "n_fields": n_fields, "identity_err_max": worst_id, "parity_defect_max": worst_par,
        "adjoint_err_max": worst_adj, "restrict_err_max": worst_rt, "fft_cg_gap": solver_gap,
        "neumann_grids": grids, "neumann_errors": tuple(errs), "neumann_ratios": tuple(ratios),
    })
    res.verdicts["C1"] = bool(worst_id <= tol and worst_par <= tol and worst_adj <= tol
                              and worst_rt == 0.0
                              and solver_gap <= crit.threshold("C1", "solver_agreement_tol"))
    lo, hi = crit.threshold("C2", "ratio_lo"), crit.threshold("C2", "ratio_hi")
    res.verdicts["C2"] = bool(ratios and all(lo <= r <= hi for r in ratios))
    res.text.append(f"max |E_whole/E_half - 2| over {n_fields} fields: {worst_id:.2e}")
    res.text.append("Neumann error ratios: " + ", ".join(f"{r:.3f}" for r in ratios))
    return res


# --- 2. mms_convergence ---------------------------------------------------------------------------

def mms_solution(x1, x2, t):
    return np.cos(x2) * np.exp(-t) + 0.0 * x1, 0.0 * x1


def mms_convergence(cfg: ExperimentConfig, ctx: Context) -> ExperimentResult:
    res = ExperimentResult(cfg.name)
    p = cfg.params
    if p.rho_far <= 0.0 or p.capA != 0.0:
        raise ValidationError("the manufactured solution needs rho_far > 0 and A = 0")
    mu = p.mu

    def forcing(x1, x2, t):
        # rho = 1: rho u_t - mu Lap u = (mu - 1) cos(x2) exp(-t)
        return ((mu - 1.0) * np.cos(x2) * np.exp(-t) + 0.0 * x1, 0.0 * x1)

    levels = tuple(int(m) for m in cfg.extra.get("mms_levels", (1, 2, 4)))
    dt_h2 = float(cfg.extra.get("dt_h2", 0.5))
    rows, errs = [], []
    mp = make_params(p.mu, p.lam, p.gamma, 0.0, 1.0)
    for m in levels:
        grid = make_grid(cfg.grid.lx, cfg.grid.ly, cfg.grid.nx * m, cfg.grid.ny * m)
        s0, _ = build_ic("perturbed_constant", grid, mp, dict(rho_amp=0.0))
        s0 = s0.copy_with(u1=Field.sample(grid, "xface", lambda a, b: mms_solution(a, b, 0.0)[0]).data)
        scfg = _stepper_cfg(cfg, forcing=forcing, edge_velocity=mms_solution,
                            dt_max=min(cfg.stepper["dt_max"], dt_h2 * grid.h ** 2))
        s = csolve.run(s0, mp, scfg, cfg.t_end)
        ex = Field.sample(grid, "xface", lambda a, b: mms_solution(a, b, cfg.t_end)[0]).data
        e_u = float(np.sqrt(np.sum((s.u[0].data - ex) ** 2) * grid.cell_area))
        e_v = float(np.max(np.abs(s.u[1].data)))
        e_r = float(np.max(np.abs(s.rho.data - 1.0)))
        errs.append(e_u)
        rows.append((grid.nx, grid.ny, grid.h, e_u, e_v, e_r))
    orders = [math.log2(errs[i] / errs[i + 1]) * (1.0 if levels[i + 1] == 2 * levels[i] else
                                                   math.log(2) / math.log(levels[i + 1] / levels[i]))
              for i in range(len(errs) - 1)]
    _write_table(ctx.run_dir / "series.csv", ("nx", "ny", "h", "err_u1_l2", "max_u2", "max_rho_dev"), rows)
    res.summary.update({"levels": levels, "errors": tuple(errs), "orders": tuple(orders),
                        "min_order": min(orders) if orders else float("nan")})
    res.verdicts["C3"] = bool(orders and min(orders) >= crit.threshold("C3", "min_order"))
    res.text.append("refinement: " + "; ".join(f"{r[0]}x{r[1]} err {r[3]:.3e}" for r in rows))
    res.text.append("observed orders: " + ", ".join(f"{o:.3f}" for o in orders))
    return res


# --- 3. density_bound_sweep ------------------------------------------------------------------------

def _sweep_jobs(cfg, ctx, keep=()):
    if not cfg.nu_list:
        raise ValidationError(f"{cfg.name} needs nu_list")
    return [(cfg, sweep_params(cfg.params, nu), ctx.run_dir / "members" / _nu_tag(nu), "compressible", keep)
            for nu in cfg.nu_list]


def _collect(res: ExperimentResult, outcomes):
    good = {}
    for mdir, out, err in outcomes:
        if err is not None:
            res.failures.append(f"{Path(mdir).name}: {err}")
        else:
            good[Path(mdir).name] = out
    return good


def density_bound_sweep(cfg: ExperimentConfig, ctx: Context) -> ExperimentResult:
    res = ExperimentResult(cfg.name)
    s0, _ = build_ic(cfg.ic_preset, cfg.grid, cfg.params, cfg.ic)
    rho0_max = float(np.max(s0.rho.data))
    base = 1.0 + cfg.params.rho_far + rho0_max
    b_all = crit.threshold("C5", "all_factor") * base
    b_top = crit.threshold("C5", "top_factor") * base
    done = _collect(res, _run_members(ctx, _sweep_jobs(cfg, ctx)))
    rows, per = [], []
    for nu in cfg.nu_list:
        tag = _nu_tag(nu)
        if tag not in done:
            per.append((nu, float("nan")))
            continue
        s = _load_series(ctx.run_dir / "members" / tag)
        m = float(np.max(s["rho_max_step"]))
        per.append((nu, m))
        rows.append((nu, m, m <= b_all, m <= b_top))
    _write_table(ctx.run_dir / "series.csv", ("nu", "max_rho", "within_bound", "within_tight_bound"), rows)
    maxes = np.array([m for _, m in per])
    ok_all = np.isfinite(maxes) & (maxes <= b_all)
    half = len(per) // 2
    top = ok_all[half:]
    onset = None
    for i in range(len(per)):
        if ok_all[i:].all():
            onset = per[i][0]
            break
    tight = bool(np.isfinite(maxes[-1]) and maxes[-1] <= b_top)
    res.summary.update({"rho0_max": rho0_max, "bound_all": b_all, "bound_top": b_top,
                        "nu_list": cfg.nu_list, "max_rho": tuple(maxes),
                        "all_runs_within_bound": bool(ok_all.all()),
                        "top_half_within_bound": bool(top.all()),
                        "largest_nu_within_tight_bound": tight,
                        "empirical_onset_nu": onset if onset is not None else float("nan")})
    res.verdicts["C5"] = bool(top.all() and tight and not res.failures)
    res.text.append(f"bounds {b_all:.4g} (all) and {b_top:.4g} (largest nu); "
                    "max rho per nu: " + ", ".join(f"{nu:g}:{m:.4f}" for nu, m in per))
    return res


# --- 4. vacuum_decay ------------------------------------------------------------------------------

def _single(cfg, ctx, solver="compressible", keep=()):
    (mdir, out, err), = _run_members(ctx, [(cfg, cfg.params, ctx.run_dir, solver, keep)])
    return out, err


def _fit(t, y, window):
    m = (t >= window[0]) & (t <= window[1]) & (t > 0) & np.isfinite(y) & (y > 0)
    try:
        return diag.fit_power(diag.DecaySeries(t[m], y[m], (window[0], window[1])))
    except ValidationError:
        return diag.PowerFit(float("nan"), float("nan"), 0.0, int(m.sum()))


def vacuum_decay(cfg: ExperimentConfig, ctx: Context) -> ExperimentResult:
    res = ExperimentResult(cfg.name)
    if not cfg.params.vacuum:
        raise ValidationError("vacuum_decay needs rho_far = 0")
    out, err = _single(cfg, ctx)
    if err:
        res.failures.append(err)
        for cid in cfg.verdicts:
            res.verdicts[cid] = False
        return res
    s = _load_series(ctx.run_dir)
    t, mass, E = s["t"], s["mass"], s["energy"]
    drift = float(np.max(np.abs(mass - mass[0])) / mass[0])
    rates = np.diff(E) / np.diff(t)
    rise = float(max(0.0, np.max(rates))) / E[0] if rates.size else 0.0

    # fit window: configured window, cut where the edge monitor first fires
    lo, hi = cfg.fit_window
    edge_tol = crit.threshold("C7", "edge_tol")
    fired = np.nonzero(s["edge_ratio"] > edge_tol)[0]
    t_edge = float(t[fired[0]]) if fired.size else float("inf")
    if fired.size:
        hi = min(hi, float(t[max(fired[0] - 1, 0)]))
    window = (lo, hi)
    f_grad = _fit(t, s["grad_u_l2"], window)
    f_udot = _fit(t, s["sqrt_rho_udot_l2"], window)
    fits = {"grad_u_l2": f_grad, "sqrt_rho_udot_l2": f_udot}
    for c in s:
        if c.startswith(("grad_u_l", "p_l")) and c not in fits:
            fits[c] = _fit(t, s[c], window)

    ball = float(np.nanmin(s["mass_ball"]))
    ratio = s["moment_1"] / (1.0 + t)
    mom = float(np.max(ratio) / ratio[0])

    res.summary.update({"n1": float(out["n1"]), "mass0": float(mass[0]), "mass_drift_rel": drift,
                        "energy0": float(E[0]), "energy_rise_rate_rel": rise,
                        "edge_fired_at": t_edge, "fit_window": window})
    for k, f in fits.items():
        res.summary[f"fit.{k}.exponent"] = f.exponent
        res.summary[f"fit.{k}.r2"] = f.r2
        res.summary[f"fit.{k}.n"] = f.n
    res.summary.update({"mass_ball_min": ball, "moment_ratio_max": mom})
    c4 = drift <= crit.threshold("C4", "mass_drift_rel") and rise <= crit.threshold("C4", "energy_rise_rate")
    r2 = crit.threshold("C7", "min_r2")
    c7 = (f_grad.exponent <= crit.threshold("C7", "grad_exp_max") and f_grad.r2 >= r2
          and f_udot.exponent <= crit.threshold("C7", "udot_exp_max") and f_udot.r2 >= r2)
    c8 = ball >= crit.threshold("C8", "ball_mass_min") and mom <= crit.threshold("C8", "moment_ratio_max")
    all_v = {"C4": bool(c4), "C7": bool(c7), "C8": bool(c8)}
    for cid in (cfg.verdicts or tuple(all_v)):
        res.verdicts[cid] = all_v[cid]
    res.text.append(f"mass drift {drift:.2e}, energy rise rate {rise:.2e} E0/unit time")
    res.text.append(f"window [{window[0]:g}, {window[1]:g}]: grad u exponent {f_grad.exponent:.3f} "
                    f"(r2 {f_grad.r2:.4f}), sqrt(rho) udot exponent {f_udot.exponent:.3f} (r2 {f_udot.r2:.4f})")
    res.text.append(f"min half-ball mass {ball:.4f}; max moment ratio {mom:.4f}")
    return res


# --- 5. nonvacuum_longtime --------------------------------------------------------------------------

def nonvacuum_longtime(cfg: ExperimentConfig, ctx: Context) -> ExperimentResult:
    res = ExperimentResult(cfg.name)
    if cfg.params.vacuum:
        raise ValidationError("nonvacuum_longtime needs rho_far > 0")
    t_ref = crit.threshold("C9", "t_ref")
    if cfg.t_end <= t_ref:
        raise ValidationError(f"t_end must exceed {t_ref}")
    out, err = _single(cfg, ctx)
    if err:
        res.failures.append(err)
        res.verdicts["C9"] = False
        return res
    s = _load_series(ctx.run_dir)
    t = s["t"]
    i1 = int(np.argmin(np.abs(t - t_ref)))
    if abs(t[i1] - t_ref) > 1e-9:
        raise ValidationError(f"no sample at t = {t_ref}; choose sample_every dividing it")
    vals = {}
    for key in ("rho_dev_l4", "grad_u_l2"):
        vals[key] = (float(s[key][i1]), float(s[key][-1]))
    ratios = {k: b / a for k, (a, b) in vals.items()}
    for k, (a, b) in vals.items():
        res.summary[f"{k}.t_ref"] = a
        res.summary[f"{k}.t_end"] = b
        res.summary[f"{k}.ratio"] = ratios[k]
    res.summary["monotone_after_t_ref"] = bool(
        all(np.all(np.diff(s[k][i1:]) <= 0.0) for k in vals))
    res.verdicts["C9"] = bool(all(r <= crit.threshold("C9", "ratio_max") for r in ratios.values()))
    res.text.append(", ".join(f"{k}: {a:.3e} -> {b:.3e} (x{ratios[k]:.3f})" for k, (a, b) in vals.items()))
    return res


# --- 6. nu_sweep_limit -------------------------------------------------------------------------------

def _cell_velocity(state: State):
    u1, u2 = state.u[0].data, state.u[1].data
    return 0.5 * (u1[1:] + u1[:-1]), 0.5 * (u2[:, 1:] + u2[:, :-1])


def halfball_l2_distance(a: State, b: State, radius: float) -> float:
    """``||u_a - u_b||_L2`` over cells whose centres lie in the half ball."""
    g = a.grid
    x1, x2 = g.coords("cell")
    inside = x1 * x1 + x2 * x2 <= radius * radius
    (a1, a2), (b1, b2) = _cell_velocity(a), _cell_velocity(b)
    d = ((a1 - b1) ** 2 + (a2 - b2) ** 2)[inside]
    return float(math.sqrt(float(np.sum(d)) * g.cell_area))


def nu_sweep_limit(cfg: ExperimentConfig, ctx: Context) -> ExperimentResult:
    res = ExperimentResult(cfg.name)
    times = tuple(cfg.extra.get("compare_times", (cfg.t_end,)))
    radius = float(cfg.extra.get("ball_radius", 1.0))
    for tk in times:
        if not 0.0 < tk <= cfg.t_end:
            raise ValidationError(f"compare time {tk} outside (0, t_end]")
    jobs = _sweep_jobs(cfg, ctx, keep=times)
    jobs.append((cfg, cfg.params, ctx.run_dir / "members" / "incompressible", "incompressible", times))
    done = _collect(res, _run_members(ctx, jobs))
    lo, hi = cfg.fit_window
    rows, nus, sups = [], [], []
    dists = {tk: [] for tk in times}
    inc = ctx.run_dir / "members" / "incompressible"
    for nu in cfg.nu_list:
        tag = _nu_tag(nu)
        if tag not in done:
            continue
        s = _load_series(ctx.run_dir / "members" / tag)
        m = (s["t"] >= lo - 1e-12) & (s["t"] <= hi + 1e-12)
        sup = float(np.max(s["div_u_l2"][m]))
        row = [nu, sup]
        for tk in times:
            d = float("nan")
            if "incompressible" in done:
                a, _ = store.read_checkpoint(ctx.run_dir / "members" / tag / f"state_{tk:.6f}.bin")
                b, _ = store.read_checkpoint(inc / f"state_{tk:.6f}.bin")
                d = halfball_l2_distance(a, b, radius)
            dists[tk].append(d)
            row.append(d)
        nus.append(nu)
        sups.append(sup)
        rows.append(row)
    _write_table(ctx.run_dir / "series.csv",
                 ["nu", "sup_div_u_l2"] + [f"dist_l2_halfball_t{tk:g}" for tk in times], rows)
    fit = diag.PowerFit(float("nan"), float("nan"), 0.0, len(nus))
    if len(nus) >= 2:
        fit = diag.fit_power(diag.DecaySeries(np.array(nus), np.array(sups)), min_samples=2)
    decreasing = {tk: bool(len(v) == len(cfg.nu_list) and all(np.isfinite(v))
                           and all(b < a for a, b in zip(v, v[1:]))) for tk, v in dists.items()}
    res.summary.update({"nu_list": cfg.nu_list, "sup_div_u_l2": tuple(sups),
                        "fit.exponent": fit.exponent, "fit.amplitude": fit.amplitude,
                        "fit.r2": fit.r2, "ball_radius": radius})
    for tk, v in dists.items():
        res.summary[f"dist_l2_halfball_t{tk:g}"] = tuple(v)
        res.summary[f"dist_decreasing_t{tk:g}"] = decreasing[tk]
    lo_e, hi_e = crit.threshold("C6", "exp_lo"), crit.threshold("C6", "exp_hi")
    res.verdicts["C6"] = bool(lo_e <= fit.exponent <= hi_e and fit.r2 >= crit.threshold("C6", "min_r2")
                              and all(decreasing.values()) and not res.failures)
    res.text.append(f"sup ||div u|| ~ nu^{fit.exponent:.3f} (r2 {fit.r2:.4f}); "
                    + "; ".join(f"t={tk:g} distances " + ", ".join(f"{d:.3e}" for d in v)
                                for tk, v in dists.items()))
    return res


# --- 7. zlotnik_suite ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerSink:
    """``g(y) = -c y|y|^(p-1) + b``; ``g <= -N1`` on ``[zeta_bar, inf)`` with ``N1 = c zeta_bar^p - b``."""
    c: float
    p: float
    b: float

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return -self.c * y * np.abs(y) ** (self.p - 1.0) + self.b


def random_zlotnik_case(rng, violate: bool = False):
    """One random comparison problem; returns (case, h, h', T)."""
    c = rng.uniform(0.5, 3.0)
    p = rng.uniform(1.0, 3.0)
    zb = rng.uniform(0.5, 2.0)
    b = rng.uniform(-1.0, c * zb ** p)
    g = PowerSink(c, p, b)
    n1 = c * zb ** p - b
    n0 = rng.uniform(0.0, 1.0)
    theta = rng.uniform(1.5, 3.0) if violate else rng.uniform(0.0, 1.0)
    om = rng.uniform(0.5, 5.0)
    y0 = rng.uniform(0.0, 3.0)
    T = 5.0

    def h(t):
        return theta * n1 * t + n0 * np.sin(om * t) ** 2

    def dh(t):
        return theta * n1 + n0 * om * np.sin(2.0 * om * t)

    case = diag.ZlotnikCase(y0=y0, g=g, n0_const=n0, n1_const=n1, zeta_bar=zb)
    return case, h, dh, T


def solve_zlotnik(case, h, dh, T, n=400):
    from scipy.integrate import solve_ivp

    ts = np.linspace(0.0, T, n)
    sol = solve_ivp(lambda t, y: case.g(y) + dh(t), (0.0, T), [case.y0], t_eval=ts,
                    method="DOP853", rtol=1e-10, atol=1e-12)
    if not sol.success:
        raise ArithmeticError(f"ODE integration failed: {sol.message}")
    return diag.zlotnik_check(case, diag.DecaySeries(ts, sol.y[0]), diag.DecaySeries(ts, h(ts)))


def trace_level(cfg: ExperimentConfig, m: int):
    """Residual trace from ``trace_x0`` on the grid refined ``m`` times."""
    grid = make_grid(cfg.grid.lx, cfg.grid.ly, cfg.grid.nx * m, cfg.grid.ny * m)
    s0, _ = build_ic(cfg.ic_preset, grid, cfg.params, cfg.ic)
    scfg = _stepper_cfg(cfg)
    traj = [s0]

    def stepper(s, dt):
        new, rep = csolve.step(s, cfg.params, scfg, dt)
        traj.append(new)
        return new, rep

    def dtf(s):
        return min(csolve.cfl_dt(s, cfg.params, None, scfg), scfg.dt_max)

    csolve.run(s0, cfg.params, scfg, cfg.t_end, step_fn=stepper, dt_fn=dtf)
    # run() snaps the final time; keep the trajectory consistent with it
    traj[-1] = traj[-1].copy_with(t=cfg.t_end)
    return diag.trace_density_characteristic(traj, cfg.extra.get("trace_x0", (0.35, 0.35)), cfg.params)


def zlotnik_suite(cfg: ExperimentConfig, ctx: Context) -> ExperimentResult:
    res = ExperimentResult(cfg.name)
    rng = np.random.default_rng(cfg.seed)
    n_cases = int(cfg.extra.get("zlotnik_cases", crit.threshold("C10", "n_cases")))
    rows = []
    n_hyp = n_pass = 0
    for k in range(n_cases):
        violate = k % 10 == 9
        case, h, dh, T = random_zlotnik_case(rng, violate)
        r = solve_zlotnik(case, h, dh, T)
        n_hyp += r.hypothesis_ok
        n_pass += bool(r.passed)
        rows.append((k, case.y0, case.n0_const, case.n1_const, case.zeta_bar, violate,
                     r.hypothesis_ok, r.passed if r.passed is not None else "n/a", r.bound, r.slack))
    _write_table(ctx.run_dir / "series.csv",
                 ("case", "y0", "N0", "N1", "zeta_bar", "built_to_violate", "hypothesis_ok", "passed",
                  "bound", "slack"), rows)
    lemma_ok = n_hyp > 0 and n_pass == n_hyp

    levels = tuple(int(m) for m in cfg.extra.get("trace_levels", (1, 2, 4)))
    tmin = float(cfg.extra.get("trace_tmin", 0.1))
    resid, trunc = [], []
    for m in levels:
        tr = trace_level(cfg, m)
        sel = tr.t >= tmin
        resid.append(float(np.max(np.abs(tr.residual[sel]))) if sel.any() else float("nan"))
        trunc.append(bool(tr.truncated))
    ratios = [resid[i] / resid[i + 1] for i in range(len(resid) - 1)]
    trace_ok = bool(ratios and all(r >= crit.threshold("C10", "min_ratio") for r in ratios)
                    and not any(trunc))
    res.summary.update({"cases": n_cases, "hypothesis_ok": n_hyp, "bound_holds": n_pass,
                        "hypothesis_failed": n_cases - n_hyp, "trace_levels": levels,
                        "trace_tmin": tmin, "trace_residual_max": tuple(resid),
                        "trace_ratios": tuple(ratios), "trace_truncated": any(trunc)})
    res.verdicts["C10"] = bool(lemma_ok and trace_ok)
    res.text.append(f"{n_pass}/{n_hyp} cases with verified hypotheses respect the bound "
                    f"({n_cases - n_hyp} rejected by the hypothesis check)")
    res.text.append("trace residual ratios: " + ", ".join(f"{r:.3f}" for r in ratios))
    return res


REGISTRY: Dict[str, Callable[[ExperimentConfig, Context], ExperimentResult]] = {
    "reflection_unit": reflection_unit,
    "mms_convergence": mms_convergence,
    "density_bound_sweep": density_bound_sweep,
    "vacuum_decay": vacuum_decay,
    "nonvacuum_longtime": nonvacuum_longtime,
    "nu_sweep_limit": nu_sweep_limit,
    "zlotnik_suite": zlotnik_suite,
}
assert tuple(REGISTRY) == EXPERIMENTS


# --- driver --------------------------------------------------------------------------------------------

def run_dir_for(cfg: ExperimentConfig, out: Optional[str] = None) -> Path:
    return Path(out if out is not None else cfg.out_dir) / cfg.name / run_id(cfg)


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None, threads: int = 1,
                   resume: Optional[str] = None, log: Callable[[str], None] = lambda m: None
                   ) -> Tuple[int, Path, ExperimentResult]:
    """Run ``cfg``; returns ``(exit_status, run_dir, result)``.

    ``resume`` is a run directory or a checkpoint inside it: finished members
    are reused and unfinished ones restart from their newest checkpoint (or
    from the named one).
    """
    rdir = run_dir_for(cfg, out)
    resume_from = None
    if resume is not None:
        rp = Path(resume)
        if rp.is_file():
            resume_from = rp.resolve()
            if rdir.resolve() not in resume_from.parents:
                raise ValidationError(f"checkpoint {rp} is not inside run directory {rdir}")
        elif rp.resolve() != rdir.resolve():
            raise ValidationError(f"{rp} is not the run directory of this configuration ({rdir})")
        if not (rdir / "config.echo").exists():
            raise ValidationError(f"nothing to resume in {rdir}")
        if (rdir / "config.echo").read_text() != config_text(cfg):
            raise ValidationError("config.echo differs from this configuration; refusing to resume")
    else:
        if rdir.exists():
            shutil.rmtree(rdir)
    rdir.mkdir(parents=True, exist_ok=True)
    store._atomic_write(rdir / "config.echo", config_text(cfg).encode())
    ctx = Context(rdir, threads=max(1, int(threads)), resume=resume is not None,
                  resume_from=resume_from, log=log)
    started = time.monotonic()
    try:
        result = REGISTRY[cfg.name](cfg, ctx)
    except (csolve.SolverError, ValidationError, ArithmeticError) as exc:
        result = ExperimentResult(cfg.name)
        result.failures.append(f"{type(exc).__name__}: {exc}")
        for cid in cfg.verdicts:
            result.verdicts[cid] = False
    elapsed = time.monotonic() - started

    summary = {"experiment": cfg.name, "run_id": run_id(cfg)}
    summary.update(result.summary)
    summary["failures"] = len(result.failures)
    for i, f in enumerate(result.failures):
        summary[f"failure.{i}"] = f.replace("\n", " ")
    for line in crit.table_lines():
        k, _, v = line.partition(" = ")
        summary[k] = v
    write_kv(rdir / "summary.kv", summary, comments=result.text)
    write_kv(rdir / "verdicts.kv", {k: "pass" if v else "fail" for k, v in result.verdicts.items()},
             comments=[f"criteria version {crit.CRITERIA_VERSION}"])
    (rdir / "run.log").write_text(f"wall_seconds = {elapsed:.3f}\nthreads = {ctx.threads}\n")
    log(f"{cfg.name}: {'PASS' if result.passed else 'FAIL'} ({elapsed:.1f} s) -> {rdir}")
    return (0 if result.passed else 1), rdir, result
