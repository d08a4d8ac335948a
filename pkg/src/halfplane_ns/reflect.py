"""Even/odd reflection across the wall and whole-box elliptic solves.

The doubled box is ``[-lx, lx] x [-ly, ly]``. Cell and x-face data carry no
wall row, so their mirror images are plain reversed copies; y-face and node
data share the wall row, which an odd extension pins to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Field, Grid, ValidationError

SHARED_ROW = ("yface", "node")
TRACE_TOL = 1e-12
MEAN_TOL = 1e-10


class IncompatibleRHS(ValidationError):
    pass


@dataclass(frozen=True, eq=False)
class WholeField:
    grid: Grid
    loc: str
    data: np.ndarray
    parity: str = "none"

    @property
    def half_rows(self) -> int:
        return self.data.shape[1] // 2

    def restrict(self) -> Field:
        """The upper-half (physical) part as a half-grid :class:`Field`."""
        return Field(self.grid, self.loc, self.data[:, self.grid.ny:])

    def mirror(self) -> np.ndarray:
        return self.data[:, ::-1]


def _check_loc(loc):
    if loc not in ("cell", "xface", "yface", "node"):
        raise ValidationError(f"unknown location {loc!r}")


def even_extend(f: Field) -> WholeField:
    if f.loc == "yface":
        raise ValidationError("y-face data has no even mirror; use odd_extend or vector_extend")
    _check_loc(f.loc)
    d = f.data
    if f.loc in SHARED_ROW:
        whole = np.concatenate([d[:, :0:-1], d], axis=1)
    else:
        whole = np.concatenate([d[:, ::-1], d], axis=1)
    return WholeField(f.grid, f.loc, whole, "even")


def odd_extend(g: Field, tol: float = TRACE_TOL) -> WholeField:
    _check_loc(g.loc)
    d = g.data
    if g.loc in SHARED_ROW:
        scale = max(1.0, float(np.max(np.abs(d))))
        if np.max(np.abs(d[:, 0])) > tol * scale:
            raise ValidationError("odd extension needs a vanishing wall trace")
        whole = np.concatenate([-d[:, :0:-1], d], axis=1)
        whole[:, g.grid.ny] = 0.0
    else:
        whole = np.concatenate([-d[:, ::-1], d], axis=1)
    return WholeField(g.grid, g.loc, whole, "odd")


def vector_extend(v: Tuple[Field, Field], tol: float = TRACE_TOL) -> Tuple[WholeField, WholeField]:
    """First component extended evenly, second oddly."""
    v1, v2 = v
    if v1.loc != "xface" or v2.loc != "yface":
        raise ValidationError("vector_extend expects (xface, yface) components")
    return even_extend(v1), odd_extend(v2, tol)


def parity_defect(w: WholeField) -> float:
    """Max |data - s * mirror(data)| for the recorded parity (exactly 0 when intact)."""
    if w.parity == "even":
        return float(np.max(np.abs(w.data - w.mirror())))
    if w.parity == "odd":
        return float(np.max(np.abs(w.data + w.mirror())))
    return 0.0


def _row_weights(loc, nrows):
    w = np.ones(nrows)
    if loc in SHARED_ROW:
        w[0] = w[-1] = 0.5
    return w


def grad_energy(data: np.ndarray, h: float, loc: str) -> float:
    """Discrete ||grad f||^2 from one-sided differences along both axes.

    Rows carrying a shared wall/edge line use trapezoid weights for the
    x-differences so that reflection doubles the energy exactly.
    """
    dx = np.diff(data, axis=0)
    dy = np.diff(data, axis=1)
    w = _row_weights(loc, data.shape[1])
    # (diff/h)^2 * h^2
    return float(np.sum(dx * dx * w[None, :]) + np.sum(dy * dy))


def field_grad_energy(f) -> float:
    return grad_energy(f.data, f.grid.h, f.loc)


def whole_divergence(v: Tuple[WholeField, WholeField]) -> WholeField:
    v1, v2 = v
    h = v1.grid.h
    d = (v1.data[1:, :] - v1.data[:-1, :] + v2.data[:, 1:] - v2.data[:, :-1]) / h
    parity = "even" if (v1.parity, v2.parity) == ("even", "odd") else "none"
    return WholeField(v1.grid, "cell", d, parity)


def _periodic_eigs(n1, n2, h):
    k1 = 2.0 * np.cos(2.0 * np.pi * np.arange(n1) / n1) - 2.0
    k2 = 2.0 * np.cos(2.0 * np.pi * np.arange(n2) / n2) - 2.0
    return (k1[:, None] + k2[None, :]) / (h * h)


def laplacian_periodic(a: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian with periodic wrap on both axes."""
    return (np.roll(a, 1, 0) + np.roll(a, -1, 0) + np.roll(a, 1, 1) + np.roll(a, -1, 1)
            - 4.0 * a) / (h * h)


def _periodic_matrix(n1, n2, h):
    def circ(n):
        m = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil")
        m[0, n - 1] = 1.0
        m[n - 1, 0] = 1.0
        return m.tocsr()
    return ((sp.kron(circ(n1), sp.eye(n2)) + sp.kron(sp.eye(n1), circ(n2))) / (h * h)).tocsr()


def _transform_friendly(n):
    return sfft.next_fast_len(n) == n


def poisson_whole(rhs: WholeField, method: str = "auto", tol: float = 1e-13) -> WholeField:
    """Solve the periodic 5-point problem ``Lap(phi) = rhs`` with ``mean(phi) = 0``.

    ``method`` is ``"fft"``, ``"cg"`` or ``"auto"`` (transform when both box
    sizes are fast FFT lengths, conjugate gradients otherwise).
    """
    b = np.asarray(rhs.data, dtype=float)
    h = rhs.grid.h
    scale = float(np.sum(np.abs(b)))
    if scale > 0.0 and abs(float(np.sum(b))) > MEAN_TOL * scale:
        raise IncompatibleRHS(
            f"right-hand side has nonzero mean ({np.sum(b) / b.size:.3e}); periodic problem unsolvable")
    n1, n2 = b.shape
    if method == "auto":
        method = "fft" if _transform_friendly(n1) and _transform_friendly(n2) else "cg"
    if scale == 0.0:
        phi = np.zeros_like(b)
    elif method == "fft":
        bh = sfft.fft2(b - b.mean())
        lam = _periodic_eigs(n1, n2, h)
        lam[0, 0] = 1.0
        ph = bh / lam
        ph[0, 0] = 0.0
        phi = np.real(sfft.ifft2(ph))
    elif method == "cg":
        a = -_periodic_matrix(n1, n2, h)
        rhs_flat = -(b - b.mean()).ravel()
        x, info = spla.cg(a, rhs_flat, rtol=tol, atol=0.0, maxiter=20 * (n1 + n2) + 1000)
        if info != 0:
            raise RuntimeError(f"periodic Poisson CG did not converge (info={info})")
        phi = x.reshape(n1, n2)
    else:
        raise ValueError(f"unknown Poisson method {method!r}")
    phi = phi - phi.mean()
    if rhs.parity == "even":
        phi = 0.5 * (phi + phi[:, ::-1])
    elif rhs.parity == "odd":
        phi = 0.5 * (phi - phi[:, ::-1])
    return WholeField(rhs.grid, rhs.loc, phi, rhs.parity)


def solve_g_neumann(rhoudot: Tuple[Field, Field], grid: Optional[Grid] = None,
                    method: str = "auto") -> Field:
    """Effective-flux reconstruction: ``Lap G = div(v)`` in the half plane with
    ``dG/dn = v . n`` on the wall, realised by reflecting ``v`` (first
    component even, second odd) and solving on the doubled periodic box."""
    v1, v2 = rhoudot
    if grid is not None and v1.grid != grid:
        raise ValidationError("rhoudot lives on a different grid")
    ext = vector_extend((v1, v2))
    div = whole_divergence(ext)
    g = poisson_whole(div, method=method)
    return Field(v1.grid, "cell", g.data[:, v1.grid.ny:])
