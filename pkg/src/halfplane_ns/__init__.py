"""Barotropic compressible Navier-Stokes flow in the half plane with Navier-slip walls.

Modules: ``core`` (parameters, grids, states), ``mac`` (staggered operators),
``reflect`` (wall reflections and whole-box Poisson solves), ``csolve``
(compressible IMEX integrator), ``isolve`` (incompressible reference solver),
``diag`` (energies, norms, fits, particle-path checks), ``store``
(checkpoints and series) and ``xharness`` (experiments and CLI).
"""

from .core import (FluidParams, Field, Grid, State, ValidationError, init_state, make_grid,
                   make_params)

__version__ = "0.1.0"

__all__ = ["FluidParams", "Field", "Grid", "State", "ValidationError", "init_state", "make_grid",
           "make_params", "__version__"]
