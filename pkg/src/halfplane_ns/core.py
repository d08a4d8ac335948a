"""Domain types: fluid parameters, the truncated half-plane grid, staggered
fields and flow states.

Layout conventions (used by every other module):

* the physical domain ``[-lx, lx] x [0, ly]`` is split into ``nx x ny``
  square cells of side ``h``; the wall is the edge ``x2 = 0``;
* arrays are indexed ``[i, j]`` with ``i`` along ``x1`` and ``j`` along ``x2``;
* ``cell`` data has shape ``(nx, ny)``, ``xface`` (u1) data ``(nx+1, ny)``,
  ``yface`` (u2) data ``(nx, ny+1)`` and ``node`` data ``(nx+1, ny+1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

LOCATIONS = ("cell", "xface", "yface", "node")

#: density floor used inside the implicit viscous and projection operators
RHO_FLOOR = 1e-10

MIN_CELLS = 8


class ValidationError(ValueError):
    """Raised when a constructor receives physically or geometrically invalid input."""


def dsum(a) -> float:
    """Deterministic reduction: pairwise summation over the C-order flattening."""
    return float(np.sum(np.ascontiguousarray(a, dtype=np.float64).ravel()))


@dataclass(frozen=True)
class FluidParams:
    mu: float
    lam: float
    gamma: float
    capA: float
    rho_far: float
    r_const: float = 1.0

    @property
    def nu(self) -> float:
        return 2.0 * self.mu + self.lam

    @property
    def vacuum(self) -> bool:
        return self.rho_far == 0.0

    @property
    def p_far(self) -> float:
        return self.rho_far ** self.gamma


def make_params(mu, lam, gamma, capA=0.0, rho_far=0.0) -> FluidParams:
    """Validate the physical constants and build a :class:`FluidParams`.

    The bulk combination ``nu = 2 mu + lambda`` is derived, never supplied.
    """
    mu, lam, gamma = float(mu), float(lam), float(gamma)
    capA, rho_far = float(capA), float(rho_far)
    for name, v in (("mu", mu), ("lambda", lam), ("gamma", gamma),
                    ("capA", capA), ("rho_far", rho_far)):
        if not math.isfinite(v):
            raise ValidationError(f"{name} must be finite, got {v}")
    if mu <= 0.0:
        raise ValidationError(f"mu > 0 violated (mu={mu})")
    if mu + lam < 0.0:
        raise ValidationError(f"mu+lambda >= 0 violated (mu={mu}, lambda={lam})")
    if gamma <= 1.0:
        raise ValidationError(f"gamma > 1 violated (gamma={gamma})")
    if capA < 0.0:
        raise ValidationError(f"slip coefficient A must be >= 0 (A={capA})")
    if rho_far < 0.0:
        raise ValidationError(f"far-field density must be >= 0 (rho_far={rho_far})")
    if rho_far == 0.0 and capA != 0.0:
        raise ValidationError("vacuum far field (rho_far=0) requires A=0")
    return FluidParams(mu=mu, lam=lam, gamma=gamma, capA=capA, rho_far=rho_far)


@dataclass(frozen=True)
class Grid:
    lx: float
    ly: float
    nx: int
    ny: int

    @property
    def h(self) -> float:
        return 2.0 * self.lx / self.nx

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    def shape(self, loc: str) -> Tuple[int, int]:
        nx, ny = self.nx, self.ny
        try:
            return {"cell": (nx, ny), "xface": (nx + 1, ny),
                    "yface": (nx, ny + 1), "node": (nx + 1, ny + 1)}[loc]
        except KeyError:
            raise ValidationError(f"unknown staggering location {loc!r}") from None

    def x1(self, loc: str) -> np.ndarray:
        h = self.h
        if loc in ("cell", "yface"):
            return -self.lx + (np.arange(self.nx) + 0.5) * h
        return -self.lx + np.arange(self.nx + 1) * h

    def x2(self, loc: str) -> np.ndarray:
        h = self.h
        if loc in ("cell", "xface"):
            return (np.arange(self.ny) + 0.5) * h
        return np.arange(self.ny + 1) * h

    def coords(self, loc: str) -> Tuple[np.ndarray, np.ndarray]:
        """Meshgrid (``indexing='ij'``) of the points carrying ``loc`` data."""
        return np.meshgrid(self.x1(loc), self.x2(loc), indexing="ij")


def make_grid(lx, ly, nx, ny) -> Grid:
    lx, ly = float(lx), float(ly)
    if int(nx) != nx or int(ny) != ny:
        raise ValidationError("cell counts must be integers")
    nx, ny = int(nx), int(ny)
    if nx < MIN_CELLS or ny < MIN_CELLS:
        raise ValidationError(f"below minimum resolution ({MIN_CELLS} cells per direction)")
    if lx <= 0.0 or ly <= 0.0:
        raise ValidationError("box extents must be positive")
    hx, hy = 2.0 * lx / nx, ly / ny
    if abs(hx - hy) > 4.0 * np.finfo(float).eps * max(hx, hy):
        raise ValidationError(f"non-uniform spacing requested (h mismatch: {hx} vs {hy})")
    return Grid(lx, ly, nx, ny)


@dataclass(frozen=True, eq=False)
class Field:
    grid: Grid
    loc: str
    data: np.ndarray

    def __post_init__(self):
        expected = self.grid.shape(self.loc)
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.shape != expected:
            raise ValidationError(
                f"{self.loc} field on {self.grid.nx}x{self.grid.ny} grid needs shape "
                f"{expected}, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, grid: Grid, loc: str) -> "Field":
        return cls(grid, loc, np.zeros(grid.shape(loc)))

    @classmethod
    def sample(cls, grid: Grid, loc: str, fn: Callable) -> "Field":
        x1, x2 = grid.coords(loc)
        return cls(grid, loc, np.broadcast_to(fn(x1, x2), x1.shape))


@dataclass(frozen=True, eq=False)
class State:
    rho: Field
    u: Tuple[Field, Field]
    t: float = 0.0

    def __post_init__(self):
        if self.rho.loc != "cell" or self.u[0].loc != "xface" or self.u[1].loc != "yface":
            raise ValidationError("state fields must be (cell, xface, yface) staggered")
        g = self.rho.grid
        if self.u[0].grid != g or self.u[1].grid != g:
            raise ValidationError("state fields live on different grids")

    @property
    def grid(self) -> Grid:
        return self.rho.grid

    @classmethod
    def from_arrays(cls, grid: Grid, rho, u1, u2, t=0.0) -> "State":
        return cls(Field(grid, "cell", rho),
                   (Field(grid, "xface", u1), Field(grid, "yface", u2)), float(t))

    def copy_with(self, rho=None, u1=None, u2=None, t=None) -> "State":
        g = self.grid
        return State.from_arrays(
            g,
            self.rho.data if rho is None else rho,
            self.u[0].data if u1 is None else u1,
            self.u[1].data if u2 is None else u2,
            self.t if t is None else t)


@dataclass(frozen=True)
class VacuumProfile:
    n0: float
    total_mass: float


@dataclass(frozen=True)
class WeightSpec:
    a: float = 1.5

    def __post_init__(self):
        if not self.a > 1.0:
            raise ValidationError(f"moment exponent must satisfy a > 1 (a={self.a})")


def total_mass(rho: Field) -> float:
    return dsum(rho.data) * rho.grid.cell_area


def cell_radius(grid: Grid) -> np.ndarray:
    x1, x2 = grid.coords("cell")
    return np.hypot(x1, x2)


def half_mass_radius(rho: Field, fraction: float = 0.5) -> float:
    """Smallest cell-centre radius ``r`` with mass in ``{|x| <= r}`` at least
    ``fraction`` of the total (brute-force partial sums over sorted radii)."""
    r = cell_radius(rho.grid).ravel()
    order = np.argsort(r, kind="stable")
    m = rho.data.ravel()[order] * rho.grid.cell_area
    csum = np.cumsum(m)
    target = fraction * csum[-1]
    k = int(np.searchsorted(csum, target, side="left"))
    k = min(k, r.size - 1)
    return float(r[order][k])


def init_state(grid: Grid, rho0: Callable, u0: Callable, params: FluidParams,
               normalize_mass: bool = False, wall_tol: float = 1e-12
               ) -> Tuple[State, Optional[VacuumProfile]]:
    """Sample initial data onto the MAC grid.

    ``rho0(x1, x2)`` and ``u0(x1, x2) -> (u1, u2)`` are vectorised samplers;
    each velocity component is sampled at its own face centres. In vacuum
    mode a :class:`VacuumProfile` is returned alongside the state.
    """
    x1, x2 = grid.coords("cell")
    rho = np.broadcast_to(np.asarray(rho0(x1, x2), dtype=float), x1.shape).copy()
    if not np.all(np.isfinite(rho)):
        raise ValidationError("initial density has non-finite samples")
    if np.any(rho < 0.0):
        raise ValidationError("negative initial density sample")

    fx1, fx2 = grid.coords("xface")
    u1 = np.broadcast_to(np.asarray(u0(fx1, fx2)[0], dtype=float), fx1.shape).copy()
    gx1, gx2 = grid.coords("yface")
    u2 = np.broadcast_to(np.asarray(u0(gx1, gx2)[1], dtype=float), gx1.shape).copy()
    scale = max(1.0, float(np.max(np.abs(u2))) if u2.size else 1.0)
    if np.max(np.abs(u2[:, 0])) > wall_tol * scale:
        raise ValidationError("initial velocity violates u.n = 0 on the wall")
    u2[:, 0] = 0.0

    profile = None
    if params.vacuum:
        mass = dsum(rho) * grid.cell_area
        if mass <= 0.0:
            raise ValidationError("vacuum mode needs positive total mass")
        if normalize_mass:
            rho = rho / mass
        state = State.from_arrays(grid, rho, u1, u2, 0.0)
        profile = VacuumProfile(n0=half_mass_radius(state.rho),
                                total_mass=total_mass(state.rho))
        return state, profile
    return State.from_arrays(grid, rho, u1, u2, 0.0), profile


def pressure(rho: Field, gamma: float) -> Field:
    if np.any(rho.data < 0.0):
        raise ValidationError("negative density in pressure law")
    return Field(rho.grid, rho.loc, rho.data ** gamma)
