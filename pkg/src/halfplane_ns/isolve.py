"""Variable-density incompressible reference solver on the shared MAC grid.

A step is a two-stage Heun pass.  Density is carried by the same MUSCL fluxes
as the compressible solver, combined as a convex average of forward-Euler
stages (so the discrete min/max principle holds for divergence-free
velocities).  Each stage is a viscous solve followed by a density-weighted
projection ``div((1/rho_hat) grad phi) = div(u*)/dt``.  The predictor stage
is a plain (non-incremental) projection; its pressure is then used as the
guess in the corrector, which only projects the increment.  The splitting
error is therefore third order per step, and since the guess is rebuilt
inside every step, a step depends only on ``(rho, u)`` and restarts are
exact.  Viscosity is backward Euler in the predictor and trapezoidal in the
corrector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mac
from .core import RHO_FLOOR, Field, FluidParams, Grid, State, ValidationError
from .csolve import ConvergenceError, SolverError, StepReport, _limited_update

PROJ_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class IProjection:
    pressure: Field
    div_residual: float
    floored_fraction: float = 0.0


@dataclass(frozen=True)
class IConfig:
    cfl: float = 0.25
    rho_floor: float = RHO_FLOOR
    forcing: Optional[Callable] = None
    dt_max: float = math.inf


def idt(state: State, cfg: IConfig = IConfig()) -> float:
    """Advective step ``cfl * h / max|u|`` (capped by ``dt_max``)."""
    umax = max(float(np.max(np.abs(state.u[0].data))), float(np.max(np.abs(state.u[1].data))))
    if umax == 0.0:
        if math.isfinite(cfg.dt_max):
            return cfg.dt_max
        raise SolverError("degenerate state: fluid at rest and no dt_max given")
    return min(cfg.cfl * state.grid.h / umax, cfg.dt_max)


def _pinned_poisson(grid: Grid, wface):
    """Factor ``D W D^T`` on cells with cell 0 pinned (removes the constant mode)."""
    D = mac.divergence_matrix(grid)
    P = (D @ sp.diags(wface) @ D.T).tocsc()
    return spla.splu(P[1:, 1:].tocsc(), permc_spec="MMD_AT_PLUS_A")


def _project(grid, zstar, dface, cgrad):
    """``u = u* - (cgrad / rho_hat) grad phi`` with ``div u = 0``; returns (u, phi)."""
    D = mac.divergence_matrix(grid)
    w = 1.0 / dface
    lu = _pinned_poisson(grid, w)
    # D(u* + cgrad W D^T phi) = 0  ->  (D W D^T) phi = -D u* / cgrad
    rhs = -(D @ zstar) / cgrad
    phi = np.zeros(grid.nx * grid.ny)
    phi[1:] = lu.solve(rhs[1:])
    z = zstar + cgrad * w * (D.T @ phi)
    return z, phi.reshape(grid.nx, grid.ny)


def _solve_stage(grid, capA, mu, dface, c_visc, c_grad, rhs_u, pi_guess=None):
    """Viscous predictor with a pressure guess, then the weighted projection."""
    D = mac.divergence_matrix(grid)
    if pi_guess is not None:
        # grad = -D^T on interior faces
        rhs_u = rhs_u + c_grad * (D.T @ pi_guess.ravel())
    if c_visc > 0.0:
        A = (sp.diags(dface) - (c_visc * mu) * mac.laplacian_matrix(grid, capA)).tocsc()
        try:
            lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise ConvergenceError(f"viscous factorisation failed: {exc}") from exc
        zstar = lu.solve(rhs_u)
        res = np.linalg.norm(A @ zstar - rhs_u)
        if not np.isfinite(res) or res > 1e-10 * max(np.linalg.norm(rhs_u), 1e-300):
            zstar = zstar + lu.solve(rhs_u - A @ zstar)
    else:
        zstar = rhs_u / dface
    z, phi = _project(grid, zstar, dface, c_grad)
    pi = phi if pi_guess is None else pi_guess + phi
    return z, pi


def _explicit(rho, u1, u2, drho, params, grid, ev, f):
    h = grid.h
    rx, ry = mac.face_density(rho)
    c1, c2 = mac.convection(u1, u2, params.capA, h, ev)
    e1 = mac.cell_avg_x(drho) * u1[1:-1, :] - rx * c1
    e2 = mac.cell_avg_y(drho) * u2[:, 1:-1] - ry * c2
    e = mac.pack(e1, e2)
    if f is not None:
        e = e + mac.pack(rx, ry) * f
    return e


def _forcing(grid, cfg, t):
    if cfg.forcing is None:
        return None
    x1, x2 = grid.coords("xface")
    y1, y2 = grid.coords("yface")
    f1 = np.broadcast_to(np.asarray(cfg.forcing(x1[1:-1], x2[1:-1], t)[0], float), (grid.nx - 1, grid.ny))
    f2 = np.broadcast_to(np.asarray(cfg.forcing(y1[:, 1:-1], y2[:, 1:-1], t)[1], float), (grid.nx, grid.ny - 1))
    return mac.pack(f1, f2)


def _assemble(z, grid):
    z1, z2 = mac.unpack(z, grid)
    u1 = np.zeros(grid.shape("xface"))
    u2 = np.zeros(grid.shape("yface"))
    u1[1:-1] = z1
    u2[:, 1:-1] = z2
    return u1, u2


def istep(state: State, params: FluidParams, dt: float,
          cfg: IConfig = IConfig()) -> Tuple[State, IProjection]:
    if not (dt > 0.0 and math.isfinite(dt)):
        raise ValidationError(f"time step must be positive and finite, got {dt}")
    grid = state.grid
    h = grid.h
    ev = mac.edge_values(grid, None, 0.0)
    rho0 = np.asarray(state.rho.data)
    u1n = np.array(state.u[0].data)
    u2n = np.array(state.u[1].data)
    mac.impose_edges(u1n, u2n, ev)
    floor = cfg.rho_floor
    L = mac.laplacian_matrix(grid, params.capA)

    rx0, ry0 = mac.face_density(rho0)
    zn = mac.pack(u1n[1:-1], u2n[:, 1:-1])
    mn = np.maximum(mac.pack(rx0, ry0), floor) * zn

    # predictor
    fx, fy = mac.mass_flux(rho0, u1n, u2n, params.rho_far)
    drho0 = -mac.divergence(fx, fy, h)
    e0 = _explicit(rho0, u1n, u2n, drho0, params, grid, ev, _forcing(grid, cfg, state.t))
    rho1 = _limited_update(rho0, fx, fy, dt, h)
    rx1, ry1 = mac.face_density(rho1)
    z1, pi1 = _solve_stage(grid, params.capA, params.mu, np.maximum(mac.pack(rx1, ry1), floor),
                           dt, dt, mn + dt * e0)
    v1, v2 = _assemble(z1, grid)

    # corrector
    gx, gy = mac.mass_flux(rho1, v1, v2, params.rho_far)
    drho1 = -mac.divergence(gx, gy, h)
    e1 = _explicit(rho1, v1, v2, drho1, params, grid, ev, _forcing(grid, cfg, state.t + dt))
    rho_fe = _limited_update(rho1, gx, gy, dt, h)
    rho2 = 0.5 * (rho0 + rho_fe)
    rx2, ry2 = mac.face_density(rho2)
    d2 = np.maximum(mac.pack(rx2, ry2), floor)
    rhs = mn + 0.5 * dt * (e0 + e1) + 0.5 * dt * params.mu * (L @ zn)
    z2, pi = _solve_stage(grid, params.capA, params.mu, d2, 0.5 * dt, dt, rhs, pi1)
    u1, u2 = _assemble(z2, grid)

    if not (np.all(np.isfinite(rho2)) and np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
        raise SolverError(f"NaN/Inf detected at t={state.t + dt:.6g}")
    if np.any(rho2 < 0.0):
        raise SolverError(f"negative density {rho2.min():.3e}")
    div_res = float(np.max(np.abs(mac.divergence(u1, u2, h))))
    if div_res > PROJ_TOL:
        raise ConvergenceError(f"projection left max|div u| = {div_res:.2e}")
    pi = pi - pi.mean()
    new = State.from_arrays(grid, rho2, u1, u2, state.t + dt)
    frac = float(np.mean(np.concatenate([rx2.ravel(), ry2.ravel()]) < floor))
    return new, IProjection(Field(grid, "cell", pi), div_res, frac)


def project(state: State, rho_floor: float = RHO_FLOOR) -> Tuple[State, IProjection]:
    """Weighted projection of ``state.u`` onto discretely divergence-free faces."""
    grid = state.grid
    rx, ry = mac.face_density(state.rho.data)
    d = np.maximum(mac.pack(rx, ry), rho_floor)
    z = mac.pack(state.u[0].data[1:-1], state.u[1].data[:, 1:-1])
    z2, pi = _project(grid, z, d, 1.0)
    u1, u2 = _assemble(z2, grid)
    div_res = float(np.max(np.abs(mac.divergence(u1, u2, grid.h))))
    pi = pi - pi.mean()
    return state.copy_with(u1=u1, u2=u2), IProjection(Field(grid, "cell", pi), div_res)


def irun(state0: State, params: FluidParams, t_end: float, sample_every: float = 0.0,
         sink: Optional[Callable] = None, cfg: IConfig = IConfig(),
         checkpoint_every: float = 0.0, checkpoint_dir=None) -> State:
    """Integrate the limit system to ``t_end``; sampling/landing rules as ``csolve.run``."""
    from .csolve import StepperConfig, run

    def stepper(s, dt):
        new, proj = istep(s, params, dt, cfg)
        rep = StepReport(dt_used=dt, visc_iters=1, max_div=proj.div_residual, bc_residual=0.0)
        return new, rep

    return run(state0, params, StepperConfig(), t_end, sample_every, sink,
               checkpoint_every=checkpoint_every, checkpoint_dir=checkpoint_dir,
               step_fn=stepper, dt_fn=lambda s: idt(s, cfg))
