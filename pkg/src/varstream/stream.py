"""Rotated-flux 1-forms, stream functions and the coupling diagnostics.

The flux of a field u under a radial density is ``fp(|g|) g/|g|``; rotating
it by a quarter turn gives a cellwise closed(ish) 1-form whose potential is
the stream function.  On a simply connected lattice region the potential is
recovered by least squares, which is path independent by construction and
reports the closedness defect as a misfit.  Path integration survives only in
:func:`period`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .grid import Grid2D, ScalarField, active_cells, cell_gradients
from .lagrangian import ConjugatePair, Lagrangian

__all__ = [
    "OneForm",
    "StreamPair",
    "SingularCellError",
    "OpenPathError",
    "PathThroughUndefinedError",
    "StagnationError",
    "one_form",
    "integrate_stream",
    "period",
    "coupling_functional",
    "inverse_system_residual",
    "make_stream_pair",
]


class SingularCellError(RuntimeError):
    """Vanishing gradient met a profile with positive slope at 0."""

    def __init__(self, cells):
        super().__init__(f"{len(cells)} cells with |grad u| = 0 and fp(0) > 0")
        self.cells = cells


class OpenPathError(ValueError):
    """Loop is not a closed unit-step lattice path."""


class PathThroughUndefinedError(ValueError):
    """Loop edge with no finite form value on either side."""


class StagnationError(RuntimeError):
    """Potential solve did not reach the requested relative residual."""


@dataclass(frozen=True, eq=False)
class OneForm:
    """Cell-centred components (a, b) of ``a dx + b dy``; nan off the active
    cells, extended by zero where the gradient vanishes and the slope allows."""

    grid: Grid2D
    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True, eq=False)
class StreamPair:
    """Coupled fields with their pointwise conjugacy defect.

    ``defect >= 0`` cellwise up to rounding; its area sum ``Fvalue`` vanishes
    exactly when the pair solves the coupled first-order system.
    """

    u: ScalarField
    v: ScalarField
    defect: np.ndarray
    Fvalue: float


def one_form(L: Lagrangian, u: ScalarField) -> OneForm:
    """Quarter-turn rotation of the flux: per cell
    ``(a, b) = fp(|g|)/|g| * (-g_y, g_x)``, zero where ``|g| = 0`` and
    ``fp0 = 0``."""
    g = u.grid
    act = active_cells(g)
    gx, gy = cell_gradients(g, u.values)
    r = np.hypot(gx, gy)
    degenerate = act & (r == 0.0)
    if L.fp0 > 0 and np.any(degenerate):
        raise SingularCellError([(int(cx), int(cy)) for cy, cx in np.argwhere(degenerate)])
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(act & (r > 0), np.asarray(L.fp(r), dtype=float) / np.where(r > 0, r, 1.0), 0.0)
    a = np.where(act, -w * gy, np.nan)
    b = np.where(act, w * gx, np.nan)
    return OneForm(grid=g, a=a, b=b)


def integrate_stream(
    w: OneForm, grid: Grid2D, rtol: float = 1e-10, maxiter: int = 50000
) -> tuple[ScalarField, float]:
    """Least-squares potential of the form, shifted to null mean over the
    interior nodes.

    Minimises the cellwise mismatch ``|grad v - (a, b)|^2`` by conjugate
    gradients on the normal equations (to relative residual ``rtol``), which
    is a standard five-point-type elliptic solve.  Returns the field and the
    attained misfit ``sqrt(sum |grad v - (a,b)|^2 h^2)``.
    """
    act = active_cells(grid)
    ok = grid.nonexterior
    snodes = np.zeros_like(ok)
    snodes[:-1, :-1] |= act
    snodes[:-1, 1:] |= act
    snodes[1:, :-1] |= act
    snodes[1:, 1:] |= act
    idx = -np.ones(ok.shape, dtype=np.int64)
    order = np.argwhere(snodes)
    idx[snodes] = np.arange(len(order))
    n_unknown = len(order)
    cells = np.argwhere(act)
    h = grid.h
    nc = len(cells)
    rows = np.arange(2 * nc)
    c00 = idx[cells[:, 0], cells[:, 1]]
    c10 = idx[cells[:, 0], cells[:, 1] + 1]
    c01 = idx[cells[:, 0] + 1, cells[:, 1]]
    c11 = idx[cells[:, 0] + 1, cells[:, 1] + 1]
    # row 2k:   x-difference of cell k; row 2k+1: y-difference
    ri = np.concatenate([np.repeat(rows[0::2], 4), np.repeat(rows[1::2], 4)])
    ci = np.concatenate(
        [np.stack([c10, c11, c00, c01], axis=1).ravel(), np.stack([c01, c11, c00, c10], axis=1).ravel()]
    )
    sgn = np.tile([1.0, 1.0, -1.0, -1.0], 2 * nc) / (2 * h)
    M = scipy.sparse.csr_matrix((sgn, (ri, ci)), shape=(2 * nc, n_unknown))
    rhs = np.empty(2 * nc)
    rhs[0::2] = w.a[act]
    rhs[1::2] = w.b[act]
    A = (M.T @ M).tocsr()
    b = M.T @ rhs
    x, info = scipy.sparse.linalg.cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter)
    if info != 0:
        raise StagnationError(f"potential solve stagnated (cg info={info})")
    values = np.full(ok.shape, np.nan)
    values[snodes] = x
    mean_nodes = grid.interior & snodes
    values -= float(np.mean(values[mean_nodes]))
    misfit = float(np.sqrt(np.sum((M @ values[snodes] - rhs) ** 2) * h * h))
    return ScalarField(grid=grid, values=values), misfit


def period(w: OneForm, loop) -> float:
    """Discrete line integral of the form along a closed unit-step lattice
    path, each edge weighted by the mean of its two adjacent cell values."""
    nodes = [(int(ix), int(iy)) for ix, iy in loop]
    if len(nodes) < 4:
        raise OpenPathError("need at least 4 nodes")
    if nodes[0] != nodes[-1]:
        nodes = nodes + [nodes[0]]
    h = w.grid.h
    ny1, nx1 = w.a.shape
    total = 0.0
    for (ix, iy), (jx, jy) in zip(nodes[:-1], nodes[1:]):
        dx, dy = jx - ix, jy - iy
        if abs(dx) + abs(dy) != 1:
            raise OpenPathError(f"non-unit step {(ix, iy)} -> {(jx, jy)}")
        if dx != 0:  # horizontal edge at row iy, cell column min(ix, jx)
            cx = min(ix, jx)
            vals = [
                w.a[cy, cx]
                for cy in (iy - 1, iy)
                if 0 <= cy < ny1 and 0 <= cx < nx1 and np.isfinite(w.a[cy, cx])
            ]
            if not vals:
                raise PathThroughUndefinedError(f"edge at {(ix, iy)} has no finite form value")
            total += float(np.mean(vals)) * dx * h
        else:  # vertical edge at column ix, cell row min(iy, jy)
            cy = min(iy, jy)
            vals = [
                w.b[cy, cx]
                for cx in (ix - 1, ix)
                if 0 <= cy < ny1 and 0 <= cx < nx1 and np.isfinite(w.b[cy, cx])
            ]
            if not vals:
                raise PathThroughUndefinedError(f"edge at {(ix, iy)} has no finite form value")
            total += float(np.mean(vals)) * dy * h
    return total


def coupling_functional(
    Lf: Lagrangian, Lg: ConjugatePair, u: ScalarField, v: ScalarField
) -> tuple[float, np.ndarray]:
    """Cellwise conjugacy defect ``f(|gu|) + g(|gv|) - (u_x v_y - u_y v_x)``
    and its area sum."""
    g = u.grid
    act = active_cells(g)
    ux, uy = cell_gradients(g, u.values)
    vx, vy = cell_gradients(g, v.values)
    ru = np.hypot(ux, uy)
    rv = np.hypot(vx, vy)
    defect = (
        np.asarray(Lf.f(ru), dtype=float)
        + np.asarray(Lg.g(rv), dtype=float)
        - (ux * vy - uy * vx)
    )
    defect = np.where(act, defect, np.nan)
    f_value = float(np.nansum(np.where(act, defect, 0.0)) * g.h * g.h)
    return f_value, defect


def inverse_system_residual(
    Lg: ConjugatePair, u: ScalarField, v: ScalarField
) -> np.ndarray:
    """Cellwise violation of the inverse first-order coupling
    ``u_x = g'(|gv|) v_y/|gv|,  u_y = -g'(|gv|) v_x/|gv|`` with the 0/0
    convention where both the gradient of v and g' vanish."""
    g = u.grid
    act = active_cells(g)
    ux, uy = cell_gradients(g, u.values)
    vx, vy = cell_gradients(g, v.values)
    rv = np.hypot(vx, vy)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(
            act & (rv > 0),
            np.asarray(Lg.gp(rv), dtype=float) / np.where(rv > 0, rv, 1.0),
            0.0,
        )
    res = np.maximum(np.abs(ux - t * vy), np.abs(uy + t * vx))
    return np.where(act, res, np.nan)


def make_stream_pair(
    Lf: Lagrangian, Lg: ConjugatePair, u: ScalarField, v: ScalarField
) -> StreamPair:
    f_value, defect = coupling_functional(Lf, Lg, u, v)
    return StreamPair(u=u, v=v, defect=defect, Fvalue=f_value)
