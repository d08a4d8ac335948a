"""Compressible stepper: explicit transport and pressure, implicit viscosity.

Each step is a two-stage IMEX Runge-Kutta pass (the ARS(2,2,2) pair with the
L-stable diagonal ``1 + 1/sqrt 2``).  The explicit part carries the MUSCL
mass fluxes, centred convection and the pressure gradient; the implicit part
is the Lame operator ``mu Lap u + (mu+lambda) grad div u`` acting on the
interior face velocities, weighted by the floored face density.

Steps are stateless (nothing is cached between steps except operator
matrices), so a run restarted from a checkpoint retraces the straight run.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mac
from .core import RHO_FLOOR, Field, FluidParams, Grid, State, ValidationError

GAMMA_IMEX = 1.0 + 1.0 / math.sqrt(2.0)
DELTA_IMEX = 1.0 - 1.0 / (2.0 * GAMMA_IMEX)
# outflow limiter keeps this fraction of a donor cell's mass, so rho stays > 0
_KEEP = 1e-12


class SolverError(RuntimeError):
    """Integration aborted (NaN, negative density, ...); ``dump`` holds diagnostics."""

    def __init__(self, msg, dump=None):
        super().__init__(msg)
        self.dump = dump or {}


class ConvergenceError(SolverError):
    pass


class BudgetExceeded(RuntimeError):
    def __init__(self, msg, state=None, checkpoint=None):
        super().__init__(msg)
        self.state = state
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class StepperConfig:
    cfl: float = 0.4
    visc_tol: float = 1e-10
    visc_maxit: int = 200
    forcing: Optional[Callable] = None        # f(x1, x2, t) -> (f1, f2)
    edge_velocity: Optional[Callable] = None  # u(x1, x2, t) -> (u1, u2) on artificial edges
    rho_floor: float = RHO_FLOOR
    dt_max: float = math.inf
    wall_budget: float = math.inf             # seconds, per run() call

    def __post_init__(self):
        if not (0.0 < self.cfl <= 1.0):
            raise ValidationError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not (self.visc_tol <= 1e-8):
            raise ValidationError(f"visc_tol must be <= 1e-8, got {self.visc_tol}")
        if self.visc_maxit < 1:
            raise ValidationError("visc_maxit must be positive")
        if not self.rho_floor > 0.0:
            raise ValidationError("rho_floor must be positive")


@dataclass(frozen=True)
class StepReport:
    dt_used: float
    visc_iters: int
    max_div: float
    bc_residual: float


# --- CFL ----------------------------------------------------------------------

def _check_finite(state: State):
    for name, a in (("rho", state.rho.data), ("u1", state.u[0].data), ("u2", state.u[1].data)):
        if not np.all(np.isfinite(a)):
            raise SolverError(f"non-finite values in {name}")


def cfl_dt(state: State, params: FluidParams, grid: Optional[Grid], cfg: StepperConfig) -> float:
    """``cfl * h / (max|u| + max c)`` with ``c = sqrt(gamma rho^(gamma-1))``."""
    _check_finite(state)
    g = state.grid if grid is None else grid
    rho = state.rho.data
    umax = max(float(np.max(np.abs(state.u[0].data))), float(np.max(np.abs(state.u[1].data))))
    cmax = float(np.sqrt(params.gamma * np.max(rho) ** (params.gamma - 1.0)))
    speed = umax + cmax
    if not speed > 0.0:
        raise SolverError("degenerate state: no wave speed")
    return cfg.cfl * g.h / speed


# --- boundary fill ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GhostedVelocity:
    """Face velocity with the wall/edge values imposed and the u1 ghost rows."""
    u: Tuple[Field, Field]
    u1_padded: np.ndarray   # (nx+1, ny+2): row 0 below the wall, row -1 above the top
    capA: float

    def wall_derivative(self) -> np.ndarray:
        """Centred d2 u1 at the wall from the ghost row."""
        p = self.u1_padded
        return (p[:, 1] - p[:, 0]) / self.u[0].grid.h

    def wall_value(self) -> np.ndarray:
        p = self.u1_padded
        return 0.5 * (p[:, 1] + p[:, 0])


def apply_slip_bc(u: Tuple[Field, Field], capA: float, mu: float = 1.0,
                  edges: Optional[mac.EdgeValues] = None) -> GhostedVelocity:
    """Impose u2 = 0 on the wall, Dirichlet edge values, and the Robin ghost
    ``d2 u1 = A u1`` below the wall.  ``mu`` does not enter the closure (the
    slip condition is a kinematic ratio) and is accepted for symmetry with
    the stress form."""
    g = u[0].grid
    ev = edges if edges is not None else mac.edge_values(g, None, 0.0)
    u1 = np.array(u[0].data)
    u2 = np.array(u[1].data)
    mac.impose_edges(u1, u2, ev)
    pad = mac.pad_u1(u1, capA, g.h, ev)
    return GhostedVelocity((Field(g, "xface", u1), Field(g, "yface", u2)), pad, float(capA))


def wall_residual(u1, u2, capA, h) -> float:
    """max |u2| on the wall and |d2 u1 - A u1| from one-sided differences of the
    first three interior rows (second order, no ghost information used)."""
    f0, f1, f2 = u1[:, 0], u1[:, 1], u1[:, 2]
    # cell centres at h/2, 3h/2, 5h/2
    d0 = (-2.0 * f0 + 3.0 * f1 - f2) / h
    v0 = (15.0 * f0 - 10.0 * f1 + 3.0 * f2) / 8.0
    robin = float(np.max(np.abs(d0 - capA * v0)))
    return max(float(np.max(np.abs(u2[:, 0]))), robin)


def ghost_residual(u1, capA, h) -> float:
    """Robin defect of the centred ghost closure (roundoff by construction)."""
    r = mac.robin_ratio(capA, h)
    g = r * u1[:, 0]
    return float(np.max(np.abs((u1[:, 0] - g) / h - capA * 0.5 * (u1[:, 0] + g))))


# --- stage operators ------------------------------------------------------------

def _boundary_field(grid: Grid, ev: mac.EdgeValues):
    u1 = np.zeros(grid.shape("xface"))
    u2 = np.zeros(grid.shape("yface"))
    mac.impose_edges(u1, u2, ev)
    return u1, u2


def _visc_boundary(grid, params, ev):
    """Contribution of the Dirichlet edge values to the viscous force."""
    b1, b2 = _boundary_field(grid, ev)
    f1, f2 = mac.viscous_force(b1, b2, params.mu, params.lam, params.capA, grid.h, ev)
    return mac.pack(f1, f2)


def _forcing(grid, cfg, t):
    if cfg.forcing is None:
        return None
    x1, x2 = grid.coords("xface")
    y1, y2 = grid.coords("yface")
    f1 = np.broadcast_to(np.asarray(cfg.forcing(x1[1:-1], x2[1:-1], t)[0], float), (grid.nx - 1, grid.ny))
    f2 = np.broadcast_to(np.asarray(cfg.forcing(y1[:, 1:-1], y2[:, 1:-1], t)[1], float), (grid.nx, grid.ny - 1))
    return mac.pack(f1, f2)


def _mass_fluxes(rho, u1, u2, params):
    return mac.mass_flux(rho, u1, u2, params.rho_far)


def _limited_update(rho0, fx, fy, c, h):
    """``rho0 - c div F`` with donor-cell outflow scaling so no cell empties.

    Only cells whose outflow over the stage exceeds their content are
    touched; elsewhere this is the plain conservative update.
    """
    s = c / h
    nx, ny = rho0.shape
    out = np.zeros_like(rho0)
    out += np.maximum(fx[1:, :], 0.0) + np.maximum(-fx[:-1, :], 0.0)
    out += np.maximum(fy[:, 1:], 0.0) + np.maximum(-fy[:, :-1], 0.0)
    out *= s
    if np.any(out > rho0):
        theta = np.ones_like(rho0)
        bad = out > rho0
        theta[bad] = (1.0 - _KEEP) * rho0[bad] / out[bad]
        # donor of each face: upstream cell (ghost donors are never limited)
        tx = np.ones_like(fx)
        tx[1:-1] = np.where(fx[1:-1] > 0.0, theta[:-1], theta[1:])
        tx[0] = np.where(fx[0] < 0.0, theta[0], 1.0)
        tx[-1] = np.where(fx[-1] > 0.0, theta[-1], 1.0)
        ty = np.ones_like(fy)
        ty[:, 1:-1] = np.where(fy[:, 1:-1] > 0.0, theta[:, :-1], theta[:, 1:])
        ty[:, -1] = np.where(fy[:, -1] > 0.0, theta[:, -1], 1.0)
        fx = fx * tx
        fy = fy * ty
    return rho0 - c * mac.divergence(fx, fy, h)


def _explicit_momentum(rho, u1, u2, drho, params, grid, ev, fvec):
    """Explicit momentum tendency on interior faces (packed)."""
    h = grid.h
    rx, ry = mac.face_density(rho)
    c1, c2 = mac.convection(u1, u2, params.capA, h, ev)
    p = rho ** params.gamma
    g1, g2 = mac.grad_interior(p, h)
    e1 = mac.cell_avg_x(drho) * u1[1:-1, :] - rx * c1 - g1
    e2 = mac.cell_avg_y(drho) * u2[:, 1:-1] - ry * c2 - g2
    e = mac.pack(e1, e2)
    if fvec is not None:
        e = e + mac.pack(rx, ry) * fvec
    return e


def _floored_face(rho, floor):
    rx, ry = mac.face_density(rho)
    return np.maximum(mac.pack(rx, ry), floor)


def _assemble(u_int, grid, ev):
    z1, z2 = mac.unpack(u_int, grid)
    u1 = np.zeros(grid.shape("xface"))
    u2 = np.zeros(grid.shape("yface"))
    u1[1:-1] = z1
    u2[:, 1:-1] = z2
    mac.impose_edges(u1, u2, ev)
    return u1, u2


def _dump(state, **extra):
    d = {"t": state.t,
         "rho_min": float(np.nanmin(state.rho.data)), "rho_max": float(np.nanmax(state.rho.data)),
         "u1_absmax": float(np.nanmax(np.abs(state.u[0].data))),
         "u2_absmax": float(np.nanmax(np.abs(state.u[1].data)))}
    d.update(extra)
    return d


def step(state: State, params: FluidParams, cfg: StepperConfig, dt: float) -> Tuple[State, StepReport]:
    """Advance one step of size ``dt`` (caller keeps ``dt <= cfl_dt``)."""
    if not (dt > 0.0 and math.isfinite(dt)):
        raise ValidationError(f"time step must be positive and finite, got {dt}")
    grid = state.grid
    h = grid.h
    gam, dlt = GAMMA_IMEX, DELTA_IMEX
    t0 = state.t
    rho0 = np.asarray(state.rho.data)
    u1n = np.array(state.u[0].data)
    u2n = np.array(state.u[1].data)
    ev0 = mac.edge_values(grid, cfg.edge_velocity, t0)
    mac.impose_edges(u1n, u2n, ev0)

    V = mac.viscous_matrix(grid, params.mu, params.lam, params.capA)
    mn = _floored_face(rho0, cfg.rho_floor) * mac.pack(u1n[1:-1], u2n[:, 1:-1])

    # stage 1 (explicit only)
    fx1, fy1 = _mass_fluxes(rho0, u1n, u2n, params)
    drho1 = -mac.divergence(fx1, fy1, h)
    em1 = _explicit_momentum(rho0, u1n, u2n, drho1, params, grid, ev0, _forcing(grid, cfg, t0))

    # stage 2
    t2 = t0 + gam * dt
    ev2 = mac.edge_values(grid, cfg.edge_velocity, t2)
    rho2 = _limited_update(rho0, fx1, fy1, gam * dt, h)
    b2 = _visc_boundary(grid, params, ev2)
    d2 = _floored_face(rho2, cfg.rho_floor)
    M2 = (sp.diags(d2) - (gam * dt) * V).tocsc()
    try:
        lu = spla.splu(M2, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise ConvergenceError(f"viscous factorisation failed: {exc}", _dump(state)) from exc
    rhs2 = mn + gam * dt * (em1 + b2)
    z2 = lu.solve(rhs2)
    res2 = np.linalg.norm(M2 @ z2 - rhs2) / max(np.linalg.norm(rhs2), 1e-300)
    iters = 1
    if res2 > cfg.visc_tol and np.linalg.norm(rhs2) > 0.0:
        z2, it = _pcg(M2, rhs2, lu, z2, cfg)
        iters += it
    k2 = V @ z2 + b2
    u1s, u2s = _assemble(z2, grid, ev2)
    fx2, fy2 = _mass_fluxes(rho2, u1s, u2s, params)
    drho2 = -mac.divergence(fx2, fy2, h)
    em2 = _explicit_momentum(rho2, u1s, u2s, drho2, params, grid, ev2, _forcing(grid, cfg, t2))

    # stage 3 (= new level)
    t3 = t0 + dt
    ev3 = mac.edge_values(grid, cfg.edge_velocity, t3)
    rho3 = _limited_update(rho0, dlt * fx1 + (1.0 - dlt) * fx2, dlt * fy1 + (1.0 - dlt) * fy2, dt, h)
    b3 = _visc_boundary(grid, params, ev3)
    d3 = _floored_face(rho3, cfg.rho_floor)
    M3 = (sp.diags(d3) - (gam * dt) * V).tocsr()
    rhs3 = mn + dt * (dlt * em1 + (1.0 - dlt) * em2) + dt * (1.0 - gam) * k2 + gam * dt * b3
    z3, it3 = _pcg(M3, rhs3, lu, lu.solve(rhs3), cfg)
    iters += it3
    u1, u2 = _assemble(z3, grid, ev3)

    if not (np.all(np.isfinite(rho3)) and np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
        raise SolverError(f"NaN/Inf detected at t={t3:.6g}", _dump(state, dt=dt))
    if np.any(rho3 < 0.0):
        raise SolverError(f"negative density {rho3.min():.3e} at t={t3:.6g}", _dump(state, dt=dt))

    new = State.from_arrays(grid, rho3, u1, u2, t3)
    rep = StepReport(dt_used=float(dt), visc_iters=int(iters),
                     max_div=float(np.max(np.abs(mac.divergence(u1, u2, h)))),
                     bc_residual=max(float(np.max(np.abs(u2[:, 0]))),
                                     ghost_residual(u1, params.capA, h)))
    return new, rep


def _pcg(M, b, lu, x0, cfg: StepperConfig):
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b), 0
    if np.linalg.norm(M @ x0 - b) <= cfg.visc_tol * nb:
        return x0, 0
    count = [0]

    def cb(_):
        count[0] += 1

    prec = spla.LinearOperator(M.shape, matvec=lu.solve, dtype=float)
    x, info = spla.cg(M, b, x0=x0, rtol=cfg.visc_tol, atol=0.0, maxiter=cfg.visc_maxit,
                      M=prec, callback=cb)
    if info != 0:
        rel = np.linalg.norm(M @ x - b) / nb
        raise ConvergenceError(
            f"implicit viscous solve did not converge in {cfg.visc_maxit} iterations (rel. residual {rel:.2e})")
    return x, count[0]


# --- trajectory -----------------------------------------------------------------

def _stops(t0, t_end, every):
    """Sample instants on the global grid k*every strictly after t0, plus t_end."""
    out = []
    if every and every > 0.0:
        k = math.floor(t0 / every + 1e-9) + 1
        while k * every < t_end - 1e-12 * max(1.0, t_end):
            out.append(k * every)
            k += 1
    out.append(t_end)
    return out


def run(state0: State, params: FluidParams, cfg: StepperConfig, t_end: float,
        sample_every: float = 0.0, sink: Optional[Callable] = None,
        checkpoint_every: float = 0.0, checkpoint_dir=None,
        step_fn: Optional[Callable] = None, dt_fn: Optional[Callable] = None) -> State:
    """Integrate to ``t_end``.

    ``sink(state, prev_state, report)`` is called at each sample instant
    (multiples of ``sample_every`` plus ``t_end``); ``prev_state`` is the
    state one step earlier.  Steps are shortened to land on sample and
    checkpoint instants exactly, so splitting a run at any such instant and
    resuming from a checkpoint reproduces the straight run.
    """
    from . import store

    if not t_end >= state0.t:
        raise ValidationError("t_end precedes the initial time")
    if float(np.max(state0.rho.data)) <= 0.0:
        raise ValidationError("all-vacuum grid rejected")
    stepper = step_fn or (lambda s, dt: step(s, params, cfg, dt))
    dtf = dt_fn or (lambda s: min(cfl_dt(s, params, None, cfg), cfg.dt_max))
    if t_end == state0.t:
        return state0

    stops = sorted(set(_stops(state0.t, t_end, sample_every)
                       + (_stops(state0.t, t_end, checkpoint_every)[:-1] if checkpoint_every else [])))
    sample_set = set(_stops(state0.t, t_end, sample_every))
    ck_set = set(_stops(state0.t, t_end, checkpoint_every)[:-1]) if checkpoint_every else set()
    started = _time.monotonic()
    state = state0
    for stop in stops:
        prev, rep = state, None
        while state.t < stop:
            dt = dtf(state)
            last = state.t + dt >= stop - 1e-12 * max(1.0, abs(stop))
            if last:
                dt = stop - state.t
            prev = state
            state, rep = stepper(state, dt)
            if last:
                state = state.copy_with(t=stop)
            if _time.monotonic() - started > cfg.wall_budget:
                ck = None
                if checkpoint_dir is not None:
                    ck = store.checkpoint_path(checkpoint_dir, state.t)
                    store.write_checkpoint(state, params, ck, rho_floor=cfg.rho_floor)
                raise BudgetExceeded(f"wall-clock budget exceeded at t={state.t:.6g}", state, ck)
        if stop in ck_set and checkpoint_dir is not None:
            store.write_checkpoint(state, params, store.checkpoint_path(checkpoint_dir, stop),
                                   rho_floor=cfg.rho_floor)
        if stop in sample_set and sink is not None:
            sink(state, prev, rep)
    return state
