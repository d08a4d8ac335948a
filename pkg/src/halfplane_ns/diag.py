"""Measurements on states and trajectories: energies, norms, decay fits,
the Zlotnik comparison bound and density-characteristic residuals.

Quadrature: cell-centred quantities use the midpoint rule, face quantities
sum over interior faces (boundary faces carry prescribed data), and nodal
quantities use trapezoid weights along the domain edges.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RectBivariateSpline

from . import mac, reflect
from .core import Field, FluidParams, Grid, State, ValidationError, WeightSpec, cell_radius, dsum

DEFAULT_P = (2, 3, 4)
DEFAULT_R = (2, 3, 4)


# --- pointwise --------------------------------------------------------------------

def potential_energy_density(rho, rho_far: float, gamma: float):
    """``H(rho) = rho * int_{rho_far}^{rho} (s^gamma - rho_far^gamma) / s^2 ds`` in closed form."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0.0):
        raise ValidationError("negative density in potential energy")
    g = gamma
    if rho_far == 0.0:
        out = rho ** g / (g - 1.0)
    else:
        out = rho ** g / (g - 1.0) + rho_far ** g - g / (g - 1.0) * rho * rho_far ** (g - 1.0)
        out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def sigma(t: float) -> float:
    return min(1.0, t)


def xbar(x1, x2):
    q = math.e + x1 * x1 + x2 * x2
    return np.sqrt(q) * np.log(q) ** 2


# --- discrete fields ----------------------------------------------------------------

def _ev(grid):
    return mac.edge_values(grid, None, 0.0)


def cell_gradient(u1, u2, capA, h, ev=None):
    """Velocity gradient components at cell centres.

    ``d1u1`` and ``d2u2`` are exact cell differences; the cross derivatives
    live on nodes (with the wall ghost closure) and are averaged to cells.
    """
    nx, ny = u1.shape[0] - 1, u1.shape[1]
    if ev is None:
        ev = mac.EdgeValues(np.zeros(ny), np.zeros(ny), np.zeros(nx + 1),
                            np.zeros(nx), np.zeros(ny + 1), np.zeros(ny + 1))
    d11 = (u1[1:, :] - u1[:-1, :]) / h
    d22 = (u2[:, 1:] - u2[:, :-1]) / h
    U1 = mac.pad_u1(u1, capA, h, ev)
    U2 = mac.pad_u2(u2, ev)
    d21n = (U1[:, 1:] - U1[:, :-1]) / h      # nodes (nx+1, ny+1)
    d12n = (U2[1:, :] - U2[:-1, :]) / h      # nodes (nx+1, ny+1)

    def n2c(a):
        return 0.25 * (a[:-1, :-1] + a[1:, :-1] + a[:-1, 1:] + a[1:, 1:])

    return d11, n2c(d21n), n2c(d12n), d22


def grad_magnitude(state: State, capA: float) -> np.ndarray:
    d11, d21, d12, d22 = cell_gradient(state.u[0].data, state.u[1].data, capA, state.grid.h)
    return np.sqrt(d11 ** 2 + d21 ** 2 + d12 ** 2 + d22 ** 2)


def lp_norm(values, area, p) -> float:
    a = np.abs(np.asarray(values, dtype=float))
    if p == math.inf or p == "inf":
        return float(np.max(a)) if a.size else 0.0
    return float((dsum(a ** p) * area) ** (1.0 / p))


def node_weights(grid: Grid) -> np.ndarray:
    w1 = np.ones(grid.nx + 1)
    w1[0] = w1[-1] = 0.5
    w2 = np.ones(grid.ny + 1)
    w2[0] = w2[-1] = 0.5
    return np.outer(w1, w2)


def divergence(state: State) -> np.ndarray:
    return mac.divergence(state.u[0].data, state.u[1].data, state.grid.h)


def vorticity(state: State, capA: float) -> Field:
    g = state.grid
    w = mac.vorticity_nodes(state.u[0].data, state.u[1].data, capA, g.h, _ev(g))
    return Field(g, "node", w)


def effective_flux(state: State, params: FluidParams) -> Field:
    """``G = nu div u - (P - P(rho_far))`` at cell centres."""
    g = state.grid
    P = state.rho.data ** params.gamma
    G = params.nu * divergence(state) - (P - params.p_far)
    return Field(g, "cell", G)


def kinetic_energy(state: State) -> float:
    rx, ry = mac.face_density(state.rho.data)
    u1, u2 = state.u[0].data, state.u[1].data
    return 0.5 * (dsum(rx * u1[1:-1] ** 2) + dsum(ry * u2[:, 1:-1] ** 2)) * state.grid.cell_area


def potential_energy(state: State, params: FluidParams) -> float:
    H = potential_energy_density(state.rho.data, params.rho_far, params.gamma)
    return dsum(H) * state.grid.cell_area


def total_energy(state: State, params: FluidParams) -> float:
    return kinetic_energy(state) + potential_energy(state, params)


def material_derivative(state: State, prev: State, capA: float) -> Tuple[np.ndarray, np.ndarray]:
    """``udot = (u - u_prev)/dt + u . grad u`` on all faces.

    Boundary faces carry prescribed (time-independent) data here, so their
    acceleration is zero; in particular ``udot . n = 0`` on the wall.
    """
    if prev.grid != state.grid:
        raise ValidationError("mismatched grids")
    dt = state.t - prev.t
    if not dt > 0.0:
        raise ValidationError("previous state must precede the current one")
    g = state.grid
    u1, u2 = state.u[0].data, state.u[1].data
    c1, c2 = mac.convection(u1, u2, capA, g.h, _ev(g))
    a1 = np.zeros(g.shape("xface"))
    a2 = np.zeros(g.shape("yface"))
    a1[1:-1] = (u1[1:-1] - prev.u[0].data[1:-1]) / dt + c1
    a2[:, 1:-1] = (u2[:, 1:-1] - prev.u[1].data[:, 1:-1]) / dt + c2
    return a1, a2


def sqrt_rho_udot_l2(state: State, prev: State, capA: float) -> float:
    a1, a2 = material_derivative(state, prev, capA)
    rx, ry = mac.face_density(state.rho.data)
    return math.sqrt((dsum(rx * a1[1:-1] ** 2) + dsum(ry * a2[:, 1:-1] ** 2)) * state.grid.cell_area)


def g_from_neumann(state: State, prev: State, params: FluidParams, method: str = "auto") -> Field:
    """Reconstruct G from ``rho udot`` by the reflected Neumann solve."""
    a1, a2 = material_derivative(state, prev, params.capA)
    g = state.grid
    rho = state.rho.data
    rx = np.zeros(g.shape("xface"))
    ry = np.zeros(g.shape("yface"))
    rx[1:-1], ry[:, 1:-1] = mac.face_density(rho)
    v = (Field(g, "xface", rx * a1), Field(g, "yface", ry * a2))
    return reflect.solve_g_neumann(v, g, method=method)


def mass_in_halfball(state: State, radius: float) -> float:
    """Midpoint-rule mass of the cells whose centres lie in ``B+_radius``."""
    if not radius >= 0.0:
        raise ValidationError("radius must be non-negative")
    r = cell_radius(state.grid)
    return dsum(np.where(r <= radius, state.rho.data, 0.0)) * state.grid.cell_area


def calibrate_n1(state: State, target: float = 0.25) -> float:
    """Smallest cell-centre radius enclosing at least ``target`` mass."""
    r = cell_radius(state.grid).ravel()
    order = np.argsort(r, kind="stable")
    csum = np.cumsum(state.rho.data.ravel()[order]) * state.grid.cell_area
    k = int(np.searchsorted(csum, target, side="left"))
    if k >= r.size:
        raise ValidationError(f"total mass below the calibration target {target}")
    return float(r[order][k])


def weighted_moment(state: State, wspec: WeightSpec) -> float:
    x1, x2 = state.grid.coords("cell")
    return dsum(state.rho.data * xbar(x1, x2) ** wspec.a) * state.grid.cell_area


def linear_moment(state: State) -> float:
    """``int rho (1 + |x|^2)^(1/2)``, the moment whose growth is at most linear."""
    x1, x2 = state.grid.coords("cell")
    return dsum(state.rho.data * np.sqrt(1.0 + x1 * x1 + x2 * x2)) * state.grid.cell_area


def bc_residual(state: State, params: FluidParams) -> float:
    """max over the wall of |u2| and |d2 u1 - A u1| (one-sided differences)."""
    from .csolve import wall_residual
    return wall_residual(state.u[0].data, state.u[1].data, params.capA, state.grid.h)


def edge_activity(state: State, params: FluidParams, band: int = 2, mass_weighted: bool = False,
                  rho_rel: float = 1e-6) -> float:
    """Ratio of the largest |grad u| in the ``band`` cells next to the artificial
    edges to the largest |grad u| elsewhere.

    With ``mass_weighted`` only cells carrying density above ``rho_rel`` times
    the maximum count, which ignores the instantaneous elliptic response of
    the velocity in empty regions.
    """
    gm = grad_magnitude(state, params.capA)
    nx, ny = gm.shape
    edge = np.zeros_like(gm, dtype=bool)
    edge[:band, :] = True
    edge[-band:, :] = True
    edge[:, -band:] = True
    if mass_weighted:
        live = state.rho.data >= rho_rel * float(np.max(state.rho.data))
    else:
        live = np.ones_like(edge)
    inner = gm[(~edge) & live]
    outer = gm[edge & live]
    if inner.size == 0 or float(np.max(inner)) == 0.0:
        return 0.0
    return float(np.max(outer)) / float(np.max(inner)) if outer.size else 0.0


# --- records ----------------------------------------------------------------------

@dataclass
class DiagRecord:
    t: float
    sigma_t: float
    mass: float
    energy: float
    kinetic: float
    rho_max: float
    rho_min: float
    grad_u_l2: float
    grad_u_lp: Dict[int, float]
    div_u_l2: float
    p_lr: Dict[int, float]
    g_l2: float
    omega_l2: float
    sqrt_rho_udot_l2: Optional[float]
    mass_ball: Optional[float]
    moment_a: float
    moment_1: float
    bc_res: float
    edge_ratio: float = 0.0
    rho_dev_lr: Dict[int, float] = field(default_factory=dict)

    def row(self) -> Dict[str, float]:
        """Flat column dict, including the sigma- and t-weighted derived columns."""
        nan = float("nan")
        out = {"t": self.t, "sigma_t": self.sigma_t, "mass": self.mass, "energy": self.energy,
               "kinetic": self.kinetic, "rho_max": self.rho_max, "rho_min": self.rho_min,
               "grad_u_l2": self.grad_u_l2}
        for p, v in sorted(self.grad_u_lp.items()):
            out[f"grad_u_l{p}"] = v
        out["div_u_l2"] = self.div_u_l2
        for r, v in sorted(self.p_lr.items()):
            out[f"p_l{r}"] = v
        for r, v in sorted(self.rho_dev_lr.items()):
            out[f"rho_dev_l{r}"] = v
        su = nan if self.sqrt_rho_udot_l2 is None else self.sqrt_rho_udot_l2
        out.update({"g_l2": self.g_l2, "omega_l2": self.omega_l2, "sqrt_rho_udot_l2": su,
                    "mass_ball": nan if self.mass_ball is None else self.mass_ball,
                    "moment_a": self.moment_a, "moment_1": self.moment_1,
                    "bc_res": self.bc_res, "edge_ratio": self.edge_ratio})
        s = self.sigma_t
        out["sigma_grad_u_l2_sq"] = s * self.grad_u_l2 ** 2
        out["sigma_sqrt_rho_udot_sq"] = s * su ** 2
        out["t_grad_u_l2_sq"] = self.t * self.grad_u_l2 ** 2
        out["t2_sqrt_rho_udot_sq"] = self.t ** 2 * su ** 2
        return out


def record_columns(p_list=DEFAULT_P, r_list=DEFAULT_R) -> List[str]:
    rec = DiagRecord(0.0, 0.0, 0, 0, 0, 0, 0, 0, {p: 0.0 for p in p_list if p != 2}, 0,
                     {r: 0.0 for r in r_list}, 0, 0, None, None, 0, 0, 0,
                     rho_dev_lr={r: 0.0 for r in r_list})
    return list(rec.row().keys())


def sample(state: State, state_prev: Optional[State], params: FluidParams,
           wspec: WeightSpec = WeightSpec(), p_list: Sequence = DEFAULT_P,
           r_list: Sequence = DEFAULT_R, n1: Optional[float] = None,
           edge_mass_weighted: bool = False) -> DiagRecord:
    g = state.grid
    if state_prev is not None and state_prev.grid != g:
        raise ValidationError("mismatched grids")
    area = g.cell_area
    rho = state.rho.data
    gm = grad_magnitude(state, params.capA)
    P = rho ** params.gamma
    dp = P - params.p_far
    G = effective_flux(state, params).data
    w = vorticity(state, params.capA).data
    ww = node_weights(g)
    udot = None
    if state_prev is not None:
        udot = sqrt_rho_udot_l2(state, state_prev, params.capA)
    ke = kinetic_energy(state)
    return DiagRecord(
        t=state.t, sigma_t=sigma(state.t), mass=dsum(rho) * area,
        energy=ke + potential_energy(state, params), kinetic=ke,
        rho_max=float(np.max(rho)), rho_min=float(np.min(rho)),
        grad_u_l2=lp_norm(gm, area, 2),
        grad_u_lp={p: lp_norm(gm, area, p) for p in p_list if p != 2},
        div_u_l2=lp_norm(divergence(state), area, 2),
        p_lr={r: lp_norm(dp, area, r) for r in r_list},
        g_l2=lp_norm(G, area, 2),
        omega_l2=math.sqrt(dsum(ww * w * w) * area),
        sqrt_rho_udot_l2=udot,
        mass_ball=None if n1 is None else mass_in_halfball(state, n1 * (1.0 + state.t)),
        moment_a=weighted_moment(state, wspec),
        moment_1=linear_moment(state),
        bc_res=bc_residual(state, params),
        edge_ratio=edge_activity(state, params, mass_weighted=edge_mass_weighted),
        rho_dev_lr={r: lp_norm(rho - params.rho_far, area, r) for r in r_list})


# --- fitting ----------------------------------------------------------------------

@dataclass(frozen=True)
class DecaySeries:
    t: np.ndarray
    y: np.ndarray
    window: Tuple[float, float] = (0.0, math.inf)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if t.shape != y.shape or t.ndim != 1:
            raise ValidationError("series needs matching 1-D t and y")
        if t.size > 1 and np.any(np.diff(t) <= 0.0):
            raise ValidationError("series times must increase strictly")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    def windowed(self):
        lo, hi = self.window
        m = (self.t >= lo) & (self.t <= hi)
        return self.t[m], self.y[m]


@dataclass(frozen=True)
class PowerFit:
    exponent: float
    amplitude: float
    r2: float
    n: int = 0


def fit_power(series: DecaySeries, min_samples: int = 5) -> PowerFit:
    """Least-squares line through ``(log t, log y)`` inside the window."""
    t, y = series.windowed()
    if t.size < max(2, min_samples):
        raise ValidationError(f"degenerate window: {t.size} samples (need >= {max(2, min_samples)})")
    if np.any(t <= 0.0):
        raise ValidationError("window must lie in t > 0")
    if np.any(~(y > 0.0)):
        raise ValidationError("nonpositive values in fit window")
    lt, ly = np.log(t), np.log(y)
    if np.ptp(lt) == 0.0:
        raise ValidationError("degenerate window: no spread in t")
    A = np.vstack([lt, np.ones_like(lt)]).T
    (k, c), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (k * lt + c)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return PowerFit(float(k), float(math.exp(c)), float(min(1.0, max(0.0, r2))), int(t.size))


# --- Zlotnik comparison -------------------------------------------------------------

@dataclass(frozen=True)
class ZlotnikCase:
    y0: float
    g: Callable
    n0_const: float
    n1_const: float
    zeta_bar: float

    def __post_init__(self):
        if self.n0_const < 0.0 or self.n1_const < 0.0:
            raise ValidationError("N0 and N1 must be non-negative")
        zs = self.zeta_bar + np.concatenate([[0.0], np.geomspace(1e-6, 1e3, 64)])
        gv = np.array([float(self.g(z)) for z in zs])
        if np.any(gv > -self.n1_const + 1e-12 * max(1.0, self.n1_const)):
            raise ValidationError("g(zeta) <= -N1 fails for some zeta >= zeta_bar")


@dataclass(frozen=True)
class ZlotnikResult:
    hypothesis_ok: bool
    passed: Optional[bool]
    bound: float
    slack: float
    message: str = ""


def zlotnik_check(case: ZlotnikCase, y_series: DecaySeries, h_series: DecaySeries,
                  tol: float = 1e-9) -> ZlotnikResult:
    bound = max(case.y0, case.zeta_bar) + case.n0_const
    th, hv = h_series.t, h_series.y
    # all ordered pairs t1 < t2
    dh = hv[None, :] - hv[:, None]
    dt = th[None, :] - th[:, None]
    upper = np.triu(np.ones_like(dh, dtype=bool), 1)
    excess = dh - case.n0_const - case.n1_const * dt
    scale = max(1.0, case.n0_const, float(np.max(np.abs(hv))) if hv.size else 1.0)
    if np.any(excess[upper] > tol * scale):
        return ZlotnikResult(False, None, bound, float("nan"), "hypothesis failed")
    slack = float(np.min(bound - y_series.y))
    return ZlotnikResult(True, bool(slack >= -tol * max(1.0, abs(bound))), bound, slack,
                         "bound holds" if slack >= -tol * max(1.0, abs(bound)) else "bound violated")


# --- characteristics -----------------------------------------------------------------

def density_g(rho, params: FluidParams):
    """The ``g`` of the density ODE along particle paths."""
    rho = np.asarray(rho, dtype=float)
    if params.vacuum:
        return -rho ** (params.gamma + 1.0) / params.nu
    return -rho * (rho ** params.gamma - params.p_far) / params.nu


def _cell_padded(q, grid: Grid, far: float):
    """Cell data with a mirror row below the wall and far-field rows elsewhere."""
    nx, ny = q.shape
    out = np.full((nx + 2, ny + 2), far, dtype=float)
    out[1:-1, 1:-1] = q
    out[1:-1, 0] = q[:, 0]
    return out


_PAD = 3


def _spline(data, x, y, wall_parity, wall_shared):
    """Bicubic spline of grid data, reflected across the wall so the fit is
    smooth there (``wall_parity`` +1 even, -1 odd)."""
    k = _PAD
    if wall_shared:
        mir = wall_parity * data[:, k:0:-1]
        ym = -y[k:0:-1]
    else:
        mir = wall_parity * data[:, k - 1::-1]
        ym = -y[k - 1::-1]
    return RectBivariateSpline(x, np.concatenate([ym, y]), np.concatenate([mir, data], axis=1),
                               kx=3, ky=3)


def interp_cell(q, grid: Grid, px, py, far: float = 0.0):
    spl = _spline(np.asarray(q, float), grid.x1("cell"), grid.x2("cell"), 1.0, False)
    return spl.ev(px, py)


def interp_velocity(state: State, px, py):
    g = state.grid
    s1 = _spline(state.u[0].data, g.x1("xface"), g.x2("xface"), 1.0, False)
    s2 = _spline(state.u[1].data, g.x1("yface"), g.x2("yface"), -1.0, True)
    return s1.ev(px, py), s2.ev(px, py)


@dataclass(frozen=True)
class TraceResult:
    t: np.ndarray
    residual: np.ndarray
    path: np.ndarray
    rho: np.ndarray
    truncated: bool


def trace_density_characteristic(trajectory: Sequence[State], x0, params: FluidParams,
                                 g_source: str = "definition") -> TraceResult:
    """Residual ``r = d rho/dt - g(rho) - h'`` along the particle path from ``x0``.

    ``h' = -rho G / nu``; G comes from its definition (``"definition"``) or from
    the reflected Neumann solve driven by ``rho udot`` (``"neumann"``).
    """
    states = list(trajectory)
    if len(states) < 3:
        raise ValidationError("trajectory needs at least three states")
    g = states[0].grid
    px, py = float(x0[0]), float(x0[1])
    if not (-g.lx < px < g.lx and 0.0 <= py < g.ly):
        raise ValidationError("x0 outside the domain")
    far = params.rho_far
    ts, xs, rhos, hps = [], [], [], []
    truncated = False
    for k, s in enumerate(states):
        if k > 0:
            a = states[k - 1]
            dt = s.t - a.t
            v1, v2 = interp_velocity(a, px, py)
            qx, qy = px + dt * v1, py + dt * v2
            w1, w2 = interp_velocity(s, qx, qy)
            px = px + 0.5 * dt * (v1 + w1)
            py = py + 0.5 * dt * (v2 + w2)
            py = abs(py)
        if not (-g.lx + 3 * g.h < px < g.lx - 3 * g.h and py < g.ly - 3 * g.h):
            truncated = True
            break
        r = float(interp_cell(s.rho.data, g, px, py, far))
        if g_source == "neumann":
            if k == 0:
                G = None
            else:
                G = g_from_neumann(s, states[k - 1], params).data
                # zero-mean reconstruction -> shift to the definitional far value
                Gd = effective_flux(s, params).data
                G = G + (dsum(Gd) - dsum(G)) / G.size
        else:
            G = effective_flux(s, params).data
        hp = float("nan") if G is None else -r * float(interp_cell(G, g, px, py, 0.0)) / params.nu
        ts.append(s.t)
        xs.append((px, py))
        rhos.append(r)
        hps.append(hp)
    t = np.array(ts)
    rho = np.array(rhos)
    hp = np.array(hps)
    if t.size < 3:
        return TraceResult(t, np.array([]), np.array(xs), rho, True)
    drho = (rho[2:] - rho[:-2]) / (t[2:] - t[:-2])
    res = drho - density_g(rho[1:-1], params) - hp[1:-1]
    return TraceResult(t[1:-1], res, np.array(xs), rho, truncated)


# --- pressure transport ----------------------------------------------------------------

def _pressure_terms(state: State, params: FluidParams):
    g = state.grid
    h = g.h
    P = state.rho.data ** params.gamma
    Pp = _cell_padded(P, g, params.p_far)
    d1 = (Pp[2:, 1:-1] - Pp[:-2, 1:-1]) / (2 * h)
    d2 = (Pp[1:-1, 2:] - Pp[1:-1, :-2]) / (2 * h)
    u1c = mac.cell_avg_x(state.u[0].data)
    u2c = mac.cell_avg_y(state.u[1].data)
    div = divergence(state)
    return P, u1c * d1 + u2c * d2 + params.gamma * P * div


def pressure_transport_residual(state_prev: State, state_next: State, params: FluidParams,
                                interior: int = 0) -> float:
    """Max-norm of ``P_t + u . grad P + gamma P div u`` between two states
    (trapezoid in time, centred in space).  ``interior`` strips that many
    cells next to every edge from the max."""
    if state_prev.grid != state_next.grid:
        raise ValidationError("mismatched grids")
    dt = state_next.t - state_prev.t
    if not dt > 0.0:
        raise ValidationError("mismatched times: state_next must follow state_prev")
    P0, a0 = _pressure_terms(state_prev, params)
    P1, a1 = _pressure_terms(state_next, params)
    r = (P1 - P0) / dt + 0.5 * (a0 + a1)
    if interior:
        k = interior
        r = r[k:-k, :-k]
    return float(np.max(np.abs(r)))
