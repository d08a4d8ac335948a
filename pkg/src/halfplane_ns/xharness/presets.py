"""Initial-condition presets.

All presets share the bump ``e(x) = exp(-|x - c|^2 / (2 w^2))`` with centre
``c = (center_x1, center_x2)`` and width ``w``.

gauss_bump          rho = rho_amp * e                               (vacuum)
                    u   = amp * (x1 - c1, x2) * e
perturbed_constant  rho = rho_far + rho_amp * (1 - r^2/(2w^2)) * e
                    u   = amp * (x1 - c1, x2) * e
shear_divfree       rho = rho_far + rho_amp * e
                    u   = curl of the nodal stream function amp * x2 * e,
                    then a weighted projection (discretely div-free)
compressive         rho = rho_far + rho_amp * e
                    u   = amp * (x1 - c1, x2) * e

The factor ``x2`` keeps the normal velocity zero on the wall.
"""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from ..core import FluidParams, Grid, State, ValidationError, VacuumProfile, init_state

PRESETS = ("gauss_bump", "perturbed_constant", "shear_divfree", "compressive")

IC_DEFAULTS: Dict[str, float] = {
    "amp": 0.0,
    "rho_amp": 1.0,
    "width": 1.0,
    "center_x1": 0.0,
    "center_x2": 0.0,
    "normalize_mass": 0.0,
}


def _bump(ic):
    c1, c2, w = ic["center_x1"], ic["center_x2"], ic["width"]

    def e(x1, x2):
        return np.exp(-((x1 - c1) ** 2 + (x2 - c2) ** 2) / (2.0 * w * w))

    return e


def _radial_velocity(ic) -> Callable:
    e = _bump(ic)
    a, c1 = ic["amp"], ic["center_x1"]
    return lambda x1, x2: (a * (x1 - c1) * e(x1, x2), a * x2 * e(x1, x2))


def _zero_velocity(x1, x2):
    z = np.zeros_like(x1)
    return z, z


def _stream_velocity(grid: Grid, ic) -> Tuple[np.ndarray, np.ndarray]:
    e = _bump(ic)
    n1, n2 = grid.coords("node")
    psi = ic["amp"] * n2 * e(n1, n2)
    h = grid.h
    u1 = -(psi[:, 1:] - psi[:, :-1]) / h
    u2 = (psi[1:, :] - psi[:-1, :]) / h
    return u1, u2


def build(name: str, grid: Grid, params: FluidParams, ic: Optional[Mapping] = None
          ) -> Tuple[State, Optional[VacuumProfile]]:
    """Sample preset ``name`` onto ``grid``; returns ``(state, vacuum_profile)``."""
    p = dict(IC_DEFAULTS)
    if ic:
        p.update(ic)
    if p["width"] <= 0.0:
        raise ValidationError(f"ic width must be positive, got {p['width']}")
    e = _bump(p)
    rf = params.rho_far
    normalize = bool(p["normalize_mass"])

    if name == "gauss_bump":
        if not params.vacuum:
            raise ValidationError("gauss_bump is a vacuum preset; set rho_far = 0")
        return init_state(grid, lambda x1, x2: p["rho_amp"] * e(x1, x2), _radial_velocity(p),
                          params, normalize_mass=normalize)
    if name == "perturbed_constant":
        w2 = 2.0 * p["width"] ** 2

        def rho0(x1, x2):
            r2 = (x1 - p["center_x1"]) ** 2 + (x2 - p["center_x2"]) ** 2
            return rf + p["rho_amp"] * (1.0 - r2 / w2) * e(x1, x2)

        return init_state(grid, rho0, _radial_velocity(p), params, normalize_mass=normalize)
    if name == "compressive":
        return init_state(grid, lambda x1, x2: rf + p["rho_amp"] * e(x1, x2),
                          _radial_velocity(p), params, normalize_mass=normalize)
    if name == "shear_divfree":
        from ..isolve import project

        state, prof = init_state(grid, lambda x1, x2: rf + p["rho_amp"] * e(x1, x2),
                                 _zero_velocity, params, normalize_mass=normalize)
        u1, u2 = _stream_velocity(grid, p)
        # far-field Dirichlet on the truncation edges, wall impermeable
        u1[0, :] = u1[-1, :] = 0.0
        u2[:, 0] = u2[:, -1] = 0.0
        state, _ = project(state.copy_with(u1=u1, u2=u2))
        return state, prof
    raise ValidationError(f"unknown initial-condition preset {name!r} (known: {', '.join(PRESETS)})")
