"""Staggered (MAC) finite-difference building blocks shared by both solvers.

Boundary closure:

* wall ``x2 = 0``: u2 = 0 on the wall faces; the u1 ghost row below the wall
  is ``r * u1[:, 0]`` with ``r = (1 - A h/2) / (1 + A h/2)`` so that the
  centred difference satisfies ``d2 u1 = A u1`` at the wall; density uses an
  even mirror;
* artificial edges (``x1 = +-lx`` and ``x2 = ly``): Dirichlet velocity
  (zero unless an edge sampler is supplied) and far-field density ``rho_far``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .core import Grid


@dataclass(frozen=True)
class EdgeValues:
    """Dirichlet velocity data on the artificial edges at one instant."""
    u1_left: np.ndarray   # (ny,)   u1 on the x1 = -lx faces
    u1_right: np.ndarray  # (ny,)
    u1_top: np.ndarray    # (nx+1,) u1 at x2 = ly, x-face abscissae
    u2_top: np.ndarray    # (nx,)   u2 on the x2 = ly faces
    u2_left: np.ndarray   # (ny+1,) u2 at x1 = -lx, y-face ordinates
    u2_right: np.ndarray  # (ny+1,)


def edge_values(grid: Grid, sampler: Optional[Callable], t: float) -> EdgeValues:
    nx, ny = grid.nx, grid.ny
    if sampler is None:
        return EdgeValues(np.zeros(ny), np.zeros(ny), np.zeros(nx + 1),
                          np.zeros(nx), np.zeros(ny + 1), np.zeros(ny + 1))
    lx, ly = grid.lx, grid.ly
    yc, yf = grid.x2("cell"), grid.x2("node")
    xf, xc = grid.x1("node"), grid.x1("cell")

    def comp(x1, x2, k):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        return np.broadcast_to(np.asarray(sampler(x1, x2, t)[k], float), x1.shape).copy()

    return EdgeValues(
        u1_left=comp(-lx, yc, 0), u1_right=comp(lx, yc, 0),
        u1_top=comp(xf, ly, 0), u2_top=comp(xc, ly, 1),
        u2_left=comp(-lx, yf, 1), u2_right=comp(lx, yf, 1))


def impose_edges(u1, u2, ev: EdgeValues):
    """Write wall and edge face values in place (u2 = 0 on the wall)."""
    u1[0, :] = ev.u1_left
    u1[-1, :] = ev.u1_right
    u2[:, 0] = 0.0
    u2[:, -1] = ev.u2_top


def robin_ratio(capA: float, h: float) -> float:
    return (1.0 - 0.5 * capA * h) / (1.0 + 0.5 * capA * h)


def pad_u1(u1, capA, h, ev: EdgeValues):
    """u1 with one ghost row below the wall and one above the top edge."""
    nxp, ny = u1.shape
    out = np.empty((nxp, ny + 2))
    out[:, 1:-1] = u1
    out[:, 0] = robin_ratio(capA, h) * u1[:, 0]
    out[:, -1] = 2.0 * ev.u1_top - u1[:, -1]
    return out


def pad_u2(u2, ev: EdgeValues):
    """u2 with one ghost column beyond each lateral edge."""
    nx, nyp = u2.shape
    out = np.empty((nx + 2, nyp))
    out[1:-1] = u2
    out[0] = 2.0 * ev.u2_left - u2[0]
    out[-1] = 2.0 * ev.u2_right - u2[-1]
    return out


def divergence(u1, u2, h):
    return (u1[1:, :] - u1[:-1, :] + u2[:, 1:] - u2[:, :-1]) / h


def vorticity_nodes(u1, u2, capA, h, ev: EdgeValues):
    """omega = d1 u2 - d2 u1 at the grid nodes, using the ghost closure."""
    U1 = pad_u1(u1, capA, h, ev)
    U2 = pad_u2(u2, ev)
    d1u2 = (U2[1:, :] - U2[:-1, :]) / h
    d2u1 = (U1[:, 1:] - U1[:, :-1]) / h
    return d1u2 - d2u1


def minmod(a, b):
    return np.where(a * b > 0.0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def _upwind_flux(q, vel):
    """Second-order upwind flux along axis 0 of a padded array ``q``.

    ``q`` has one ghost layer on each end of axis 0 (ghost slopes are zero);
    ``vel`` sits on the ``q.shape[0] - 1`` faces between consecutive entries.
    """
    s = np.zeros_like(q)
    s[1:-1] = minmod(q[1:-1] - q[:-2], q[2:] - q[1:-1])
    left = q[:-1] + 0.5 * s[:-1]
    right = q[1:] - 0.5 * s[1:]
    face = np.where(vel > 0.0, left, np.where(vel < 0.0, right, 0.5 * (left + right)))
    return vel * face


def mass_flux(rho, u1, u2, rho_far):
    """Conservative MUSCL/minmod fluxes of rho*u on all x- and y-faces."""
    nx, ny = rho.shape
    qx = np.empty((nx + 2, ny))
    qx[1:-1] = rho
    qx[0] = rho_far
    qx[-1] = rho_far
    fx = _upwind_flux(qx, u1)
    qy = np.empty((ny + 2, nx))
    qy[1:-1] = rho.T
    qy[0] = rho[:, 0]
    qy[-1] = rho_far
    fy = _upwind_flux(qy, u2.T).T
    fy[:, 0] = 0.0
    return fx, fy


def continuity_rhs(rho, u1, u2, rho_far, h):
    fx, fy = mass_flux(rho, u1, u2, rho_far)
    return -divergence(fx, fy, h)


def face_density(rho):
    """Arithmetic face averages on the interior x- and y-faces."""
    return 0.5 * (rho[1:, :] + rho[:-1, :]), 0.5 * (rho[:, 1:] + rho[:, :-1])


def laplacian_interior(u1, u2, capA, h, ev: EdgeValues):
    U1 = pad_u1(u1, capA, h, ev)
    U2 = pad_u2(u2, ev)
    h2 = h * h
    l1 = ((u1[2:, :] - 2.0 * u1[1:-1, :] + u1[:-2, :])
          + (U1[1:-1, 2:] - 2.0 * U1[1:-1, 1:-1] + U1[1:-1, :-2])) / h2
    l2 = ((U2[2:, 1:-1] - 2.0 * U2[1:-1, 1:-1] + U2[:-2, 1:-1])
          + (u2[:, 2:] - 2.0 * u2[:, 1:-1] + u2[:, :-2])) / h2
    return l1, l2


def viscous_force(u1, u2, mu, lam, capA, h, ev: EdgeValues):
    """mu*Lap(u) + (mu+lambda)*grad(div u) on the interior faces."""
    l1, l2 = laplacian_interior(u1, u2, capA, h, ev)
    d = divergence(u1, u2, h)
    g1 = (d[1:, :] - d[:-1, :]) / h
    g2 = (d[:, 1:] - d[:, :-1]) / h
    return mu * l1 + (mu + lam) * g1, mu * l2 + (mu + lam) * g2


def convection(u1, u2, capA, h, ev: EdgeValues):
    """Centred (u . grad) u on the interior faces."""
    U1 = pad_u1(u1, capA, h, ev)
    U2 = pad_u2(u2, ev)
    inv2h = 0.5 / h
    ui = u1[1:-1, :]
    vbar = 0.25 * (u2[:-1, :-1] + u2[1:, :-1] + u2[:-1, 1:] + u2[1:, 1:])
    c1 = ui * (u1[2:, :] - u1[:-2, :]) * inv2h + vbar * (U1[1:-1, 2:] - U1[1:-1, :-2]) * inv2h
    vi = u2[:, 1:-1]
    ubar = 0.25 * (u1[:-1, :-1] + u1[1:, :-1] + u1[:-1, 1:] + u1[1:, 1:])
    c2 = ubar * (U2[2:, 1:-1] - U2[:-2, 1:-1]) * inv2h + vi * (u2[:, 2:] - u2[:, :-2]) * inv2h
    return c1, c2


def grad_interior(p, h):
    return (p[1:, :] - p[:-1, :]) / h, (p[:, 1:] - p[:, :-1]) / h


def cell_avg_x(q):
    return 0.5 * (q[1:, :] + q[:-1, :])


def cell_avg_y(q):
    return 0.5 * (q[:, 1:] + q[:, :-1])


# --- interior unknown packing and sparse operators ---------------------------

def n_unknowns(grid: Grid) -> int:
    return (grid.nx - 1) * grid.ny + grid.nx * (grid.ny - 1)


def pack(a1, a2):
    """Concatenate interior-face arrays of shape (nx-1, ny) and (nx, ny-1)."""
    return np.concatenate([np.ravel(a1), np.ravel(a2)])


def unpack(z, grid: Grid):
    nx, ny = grid.nx, grid.ny
    k = (nx - 1) * ny
    return z[:k].reshape(nx - 1, ny), z[k:].reshape(nx, ny - 1)


def _lap1d(n, h, lo=0.0, hi=0.0):
    main = -2.0 * np.ones(n)
    main[0] += lo
    main[-1] += hi
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / (h * h)


def _diff1d(ncell, h):
    """Cell <- interior-face difference (ncell x ncell-1), boundary faces excluded."""
    return (sp.eye(ncell, ncell - 1, k=0) - sp.eye(ncell, ncell - 1, k=-1)) / h


@lru_cache(maxsize=16)
def laplacian_matrix(grid: Grid, capA: float):
    nx, ny, h = grid.nx, grid.ny, grid.h
    r = robin_ratio(capA, h)
    l1 = sp.kron(_lap1d(nx - 1, h), sp.eye(ny)) + sp.kron(sp.eye(nx - 1), _lap1d(ny, h, lo=r, hi=-1.0))
    l2 = sp.kron(_lap1d(nx, h, lo=-1.0, hi=-1.0), sp.eye(ny - 1)) + sp.kron(sp.eye(nx), _lap1d(ny - 1, h))
    return sp.block_diag([l1, l2], format="csr")


@lru_cache(maxsize=16)
def divergence_matrix(grid: Grid):
    """Cell divergence of interior-face velocities (boundary faces held at zero)."""
    nx, ny, h = grid.nx, grid.ny, grid.h
    d1 = sp.kron(_diff1d(nx, h), sp.eye(ny))
    d2 = sp.kron(sp.eye(nx), _diff1d(ny, h))
    return sp.hstack([d1, d2], format="csr")


@lru_cache(maxsize=16)
def viscous_matrix(grid: Grid, mu: float, lam: float, capA: float):
    """Symmetric negative semi-definite matrix of the viscous operator on interior unknowns."""
    d = divergence_matrix(grid)
    v = mu * laplacian_matrix(grid, capA) - (mu + lam) * (d.T @ d)
    return v.tocsr()
