"""Masked uniform lattices, boundary data and finite-difference operators.

A grid is a rectangular lattice with per-node flags (exterior / interior /
boundary).  Interior nodes always have all four axis neighbours non-exterior;
the boundary is the nearest ring of non-interior nodes adjacent to the
interior.  Fields store one value per node, ``nan`` off their support.

Grids and fields are immutable once built and all operators are pure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "EXTERIOR",
    "INTERIOR",
    "BOUNDARY",
    "Grid2D",
    "BoundaryData",
    "ScalarField",
    "VectorField",
    "BscReport",
    "DegenerateGridError",
    "build_disk",
    "build_rect",
    "boundary_data_from_function",
    "sample_field",
    "verify_bsc",
    "gradient",
    "hessian",
    "active_cells",
    "cell_gradients",
    "tri_gradients",
    "bilinear",
    "save_field",
    "load_field",
]

EXTERIOR, INTERIOR, BOUNDARY = 0, 1, 2


class DegenerateGridError(RuntimeError):
    """Fewer usable nodes than the operators require."""


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Uniform lattice with spacing ``h``, node (ix, iy) at
    ``origin + h*(ix, iy)``; ``mask`` has shape (ny, nx) indexed [iy, ix].

    ``boundary_offset`` is the largest distance from a boundary node to the
    ideal continuum boundary it rasterises (0 when nodes lie on it exactly).
    """

    h: float
    nx: int
    ny: int
    origin: tuple[float, float]
    mask: np.ndarray
    boundary_offset: float = 0.0

    def xs(self) -> np.ndarray:
        return self.origin[0] + self.h * np.arange(self.nx)

    def ys(self) -> np.ndarray:
        return self.origin[1] + self.h * np.arange(self.ny)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs(), self.ys())

    @property
    def interior(self) -> np.ndarray:
        return self.mask == INTERIOR

    @property
    def boundary(self) -> np.ndarray:
        return self.mask == BOUNDARY

    @property
    def nonexterior(self) -> np.ndarray:
        return self.mask != EXTERIOR

    def node_xy(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin[0] + self.h * ix, self.origin[1] + self.h * iy)

    def nearest_node(self, x: float, y: float) -> tuple[int, int]:
        ix = int(round((x - self.origin[0]) / self.h))
        iy = int(round((y - self.origin[1]) / self.h))
        return min(max(ix, 0), self.nx - 1), min(max(iy, 0), self.ny - 1)


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Dirichlet trace on the boundary ring plus the slope constant of the
    bounded slope condition."""

    grid: Grid2D
    values: np.ndarray  # (ny, nx), nan off the boundary ring
    Q: float

    def __post_init__(self) -> None:
        on_ring = self.values[self.grid.boundary]
        if not np.all(np.isfinite(on_ring)):
            raise ValueError("boundary trace must be finite at every boundary node")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid2D
    values: np.ndarray  # (ny, nx)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid2D
    vx: np.ndarray
    vy: np.ndarray


@dataclass(frozen=True)
class BscReport:
    ok: bool
    witnesses: dict  # (ix, iy) -> (p_plus, p_minus) as tuples
    infeasible: list  # nodes without a witness pair


def build_disk(R: float, h: float) -> Grid2D:
    """Lattice covering the open disk of radius ``R``.

    In-disk nodes whose whole 3x3 patch lies in the disk are interior; the
    remaining in-disk skin is the boundary ring carrying the trace.  Pinning
    the skin keeps every interior node's four cells active, so the interior
    equations are never truncated by the rasterised rim, and every node stays
    strictly inside the disk.
    """
    if R <= 0 or h <= 0:
        raise ValueError("R and h must be positive")
    if h >= R / 4:
        raise ValueError(f"spacing h={h} too coarse for radius {R}: need h < R/4")
    m = int(np.ceil(R / h)) + 1
    n = 2 * m + 1
    origin = (-m * h, -m * h)
    xs = origin[0] + h * np.arange(n)
    X, Y = np.meshgrid(xs, xs)
    inside = X * X + Y * Y < R * R
    core = np.zeros_like(inside)
    core[1:-1, 1:-1] = (
        inside[1:-1, 1:-1]
        & inside[1:-1, :-2] & inside[1:-1, 2:]
        & inside[:-2, 1:-1] & inside[2:, 1:-1]
        & inside[:-2, :-2] & inside[:-2, 2:] & inside[2:, :-2] & inside[2:, 2:]
    )
    if int(core.sum()) < 16:
        raise DegenerateGridError("fewer than 16 interior nodes")
    mask = np.full(inside.shape, EXTERIOR, dtype=np.int8)
    mask[core] = INTERIOR
    mask[inside & ~core] = BOUNDARY
    ring = mask == BOUNDARY
    offset = float(np.max(R - np.hypot(X[ring], Y[ring])))
    return Grid2D(h=h, nx=n, ny=n, origin=origin, mask=mask, boundary_offset=offset)


def build_rect(a: float, b: float, h: float, origin: tuple[float, float] = (0.0, 0.0)) -> Grid2D:
    """Lattice on the rectangle ``origin + [0,a] x [0,b]`` with boundary
    nodes on the edges.  ``h`` must divide both side lengths."""
    if a <= 0 or b <= 0 or h <= 0:
        raise ValueError("sides and spacing must be positive")
    nx = int(round(a / h)) + 1
    ny = int(round(b / h)) + 1
    if abs((nx - 1) * h - a) > 1e-9 * a or abs((ny - 1) * h - b) > 1e-9 * b:
        raise ValueError("h must divide both side lengths")
    if (nx - 2) * (ny - 2) < 16:
        raise DegenerateGridError("fewer than 16 interior nodes")
    mask = np.full((ny, nx), BOUNDARY, dtype=np.int8)
    mask[1:-1, 1:-1] = INTERIOR
    return Grid2D(h=h, nx=nx, ny=ny, origin=(float(origin[0]), float(origin[1])), mask=mask)


def sample_field(grid: Grid2D, fn: Callable) -> ScalarField:
    """Evaluate ``fn(x, y)`` at every non-exterior node (nan elsewhere)."""
    X, Y = grid.meshgrid()
    keep = grid.nonexterior
    values = np.full((grid.ny, grid.nx), np.nan)
    values[keep] = np.asarray(fn(X[keep], Y[keep]), dtype=float)
    return ScalarField(grid=grid, values=values)


def boundary_data_from_function(grid: Grid2D, fn: Callable, Q: float) -> BoundaryData:
    X, Y = grid.meshgrid()
    ring = grid.boundary
    values = np.full((grid.ny, grid.nx), np.nan)
    values[ring] = np.asarray(fn(X[ring], Y[ring]), dtype=float)
    return BoundaryData(grid=grid, values=values, Q=float(Q))


def _one_sided_witness(D: np.ndarray, c: np.ndarray, Q: float, slack: float,
                       directions: int = 720):
    """A slope p with |p| <= Q and <p, D_k> >= c_k - slack for all k, or None.

    Tries the least-squares slope first, then scans ``directions`` rays of
    the slope disk with exact per-ray radius intervals.
    """
    if len(c) == 0:
        return np.zeros(2)
    # least-squares candidate (exact for affine traces)
    G = D.T @ D
    if np.linalg.det(G) > 1e-14:
        p = np.linalg.solve(G, D.T @ c)
        nrm = float(np.hypot(*p))
        if nrm > Q and nrm > 0:
            p = p * (Q / nrm)
        if np.all(D @ p >= c - slack):
            return p
    theta = np.linspace(0.0, 2.0 * np.pi, directions, endpoint=False)
    U = np.stack([np.cos(theta), np.sin(theta)], axis=1)  # (dirs, 2)
    A = U @ D.T  # (dirs, m)
    tiny = 1e-12 * (1.0 + float(np.max(np.abs(D))))
    with np.errstate(divide="ignore", invalid="ignore"):
        lo_b = np.where(A > tiny, c[None, :] / A, -np.inf)
        hi_b = np.where(A < -tiny, c[None, :] / A, np.inf)
    zero_ok = np.all((np.abs(A) > tiny) | (c[None, :] <= slack), axis=1)
    r_lo = np.maximum(np.max(lo_b, axis=1), 0.0)
    r_hi = np.minimum(np.min(hi_b, axis=1), Q)
    feas = zero_ok & (r_lo <= r_hi + 1e-15)
    if not np.any(feas):
        return None
    k = int(np.argmax(feas))
    r = 0.5 * (r_lo[k] + min(r_hi[k], Q))
    return r * U[k]


def verify_bsc(grid: Grid2D, bdata: BoundaryData) -> BscReport:
    """Check the bounded slope condition on the discrete boundary ring.

    For each boundary node the affine witnesses pinching the trace from above
    and below with slope at most Q are searched (least squares + 720-ray scan
    of the slope disk).  Infeasibility is reported, never raised.

    Ring nodes sit up to ``grid.boundary_offset`` away from the continuum
    boundary, which perturbs every affine comparison by at most
    ``(Q + Lip(psi)) * offset``; that consistency allowance is granted so a
    trace admitting continuum witnesses is never rejected for rasterisation
    alone.  Grids whose boundary nodes lie exactly on the boundary (offset 0)
    are checked to rounding.
    """
    ring = np.argwhere(grid.boundary)  # rows of (iy, ix)
    if len(ring) < 3:
        raise ValueError("need at least 3 boundary nodes")
    xs, ys = grid.xs(), grid.ys()
    pts = np.stack([xs[ring[:, 1]], ys[ring[:, 0]]], axis=1)
    vals = bdata.values[ring[:, 0], ring[:, 1]]
    Q = bdata.Q
    scale = 1.0 + float(np.max(np.abs(vals))) + Q * float(np.max(np.abs(pts)))
    gaps = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    np.fill_diagonal(gaps, np.inf)
    near = gaps <= 1.5 * grid.h
    lip = float(np.max(np.abs(vals[:, None] - vals[None, :])[near] / gaps[near])) if near.any() else 0.0
    slack = 1e-9 * scale + (Q + lip) * grid.boundary_offset
    witnesses = {}
    infeasible = []
    for k in range(len(ring)):
        D = pts - pts[k]
        c = vals - vals[k]
        p_plus = _one_sided_witness(D, c, Q, slack)
        q = _one_sided_witness(D, -c, Q, slack)
        p_minus = None if q is None else -q
        node = (int(ring[k, 1]), int(ring[k, 0]))
        if p_plus is None or p_minus is None:
            infeasible.append(node)
        else:
            witnesses[node] = (tuple(p_plus), tuple(p_minus))
    return BscReport(ok=not infeasible, witnesses=witnesses, infeasible=infeasible)


def _axis_derivative(V: np.ndarray, ok: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order derivative along one axis: central where both neighbours
    exist, one-sided 3-point next to the rim, first-order as a last resort."""
    out = np.full(V.shape, np.nan)

    def sh(a, k):  # shift along axis, padding with invalid
        return np.roll(a, -k, axis=axis)

    # neighbour availability (guard wrap-around with index masks)
    idx = np.arange(V.shape[axis])
    shape = [1, 1]
    shape[axis] = -1
    idx = idx.reshape(shape)
    has_p1 = (idx + 1 < V.shape[axis]) & sh(ok, 1)
    has_m1 = (idx - 1 >= 0) & sh(ok, -1)
    has_p2 = (idx + 2 < V.shape[axis]) & sh(ok, 2)
    has_m2 = (idx - 2 >= 0) & sh(ok, -2)

    central = ok & has_p1 & has_m1
    fwd = ok & has_p1 & has_p2 & ~central
    bwd = ok & has_m1 & has_m2 & ~central
    fwd1 = ok & has_p1 & ~central & ~fwd & ~bwd
    bwd1 = ok & has_m1 & ~central & ~fwd & ~bwd

    vp1, vm1 = sh(V, 1), sh(V, -1)
    vp2, vm2 = sh(V, 2), sh(V, -2)
    out = np.where(central, (vp1 - vm1) / (2 * h), out)
    out = np.where(fwd, (-3 * V + 4 * vp1 - vp2) / (2 * h), out)
    out = np.where(bwd, (3 * V - 4 * vm1 + vm2) / (2 * h), out)
    out = np.where(fwd1, (vp1 - V) / h, out)
    out = np.where(bwd1, (V - vm1) / h, out)
    return out


def gradient(f: ScalarField) -> VectorField:
    """Nodal gradient: central differences at nodes with two-sided
    neighbours, one-sided second-order next to the rim."""
    g = f.grid
    ok = g.nonexterior
    V = np.where(ok, f.values, 0.0)
    vx = _axis_derivative(V, ok, g.h, axis=1)
    vy = _axis_derivative(V, ok, g.h, axis=0)
    return VectorField(grid=g, vx=vx, vy=vy)


def hessian(f: ScalarField) -> np.ndarray:
    """5-point second derivatives and the cross difference, shape
    (ny, nx, 2, 2); nan at nodes without a full 3x3 non-exterior patch."""
    g = f.grid
    ok = g.nonexterior
    V = np.where(ok, f.values, 0.0)
    h2 = g.h * g.h
    full = np.zeros_like(ok)
    full[1:-1, 1:-1] = (
        ok[1:-1, 1:-1]
        & ok[1:-1, :-2] & ok[1:-1, 2:]
        & ok[:-2, 1:-1] & ok[2:, 1:-1]
        & ok[:-2, :-2] & ok[:-2, 2:] & ok[2:, :-2] & ok[2:, 2:]
    )
    H = np.full((g.ny, g.nx, 2, 2), np.nan)
    uxx = np.full(V.shape, np.nan)
    uyy = np.full(V.shape, np.nan)
    uxy = np.full(V.shape, np.nan)
    uxx[1:-1, 1:-1] = (V[1:-1, 2:] - 2 * V[1:-1, 1:-1] + V[1:-1, :-2]) / h2
    uyy[1:-1, 1:-1] = (V[2:, 1:-1] - 2 * V[1:-1, 1:-1] + V[:-2, 1:-1]) / h2
    uxy[1:-1, 1:-1] = (V[2:, 2:] - V[2:, :-2] - V[:-2, 2:] + V[:-2, :-2]) / (4 * h2)
    H[..., 0, 0] = np.where(full, uxx, np.nan)
    H[..., 1, 1] = np.where(full, uyy, np.nan)
    H[..., 0, 1] = np.where(full, uxy, np.nan)
    H[..., 1, 0] = H[..., 0, 1]
    return H


def active_cells(grid: Grid2D) -> np.ndarray:
    """Cells (grid squares) whose four corners are all non-exterior,
    shape (ny-1, nx-1)."""
    ok = grid.nonexterior
    return ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, :-1] & ok[1:, 1:]


def cell_gradients(grid: Grid2D, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred gradient of nodal values (average of the face
    differences), shape (ny-1, nx-1)."""
    V = np.where(grid.nonexterior, values, 0.0)
    h = grid.h
    gx = (V[:-1, 1:] + V[1:, 1:] - V[:-1, :-1] - V[1:, :-1]) / (2 * h)
    gy = (V[1:, :-1] + V[1:, 1:] - V[:-1, :-1] - V[:-1, 1:]) / (2 * h)
    return gx, gy


def tri_gradients(grid: Grid2D, values: np.ndarray):
    """Exact piecewise-linear gradients on the two triangles of each cell
    (diagonal from the SW to the NE corner)."""
    V = np.where(grid.nonexterior, values, 0.0)
    h = grid.h
    v00, v10 = V[:-1, :-1], V[:-1, 1:]
    v01, v11 = V[1:, :-1], V[1:, 1:]
    g1x = (v10 - v00) / h
    g1y = (v11 - v10) / h
    g2x = (v11 - v01) / h
    g2y = (v01 - v00) / h
    return g1x, g1y, g2x, g2y


def bilinear(values: np.ndarray, xi, yj):
    """Bilinear interpolation in index space; nan propagates from the four
    surrounding nodes."""
    xi = np.asarray(xi, dtype=float)
    yj = np.asarray(yj, dtype=float)
    ny, nx = values.shape
    i0 = np.clip(np.floor(xi).astype(int), 0, nx - 2)
    j0 = np.clip(np.floor(yj).astype(int), 0, ny - 2)
    tx = xi - i0
    ty = yj - j0
    v00 = values[j0, i0]
    v10 = values[j0, i0 + 1]
    v01 = values[j0 + 1, i0]
    v11 = values[j0 + 1, i0 + 1]
    return (
        v00 * (1 - tx) * (1 - ty)
        + v10 * tx * (1 - ty)
        + v01 * (1 - tx) * ty
        + v11 * tx * ty
    )


def _rle(mask: np.ndarray) -> list:
    flat = mask.ravel()
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(flat)]])
    return [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]


def _unrle(runs: list, shape: tuple[int, int]) -> np.ndarray:
    flat = np.concatenate([np.full(cnt, val, dtype=np.int8) for val, cnt in runs])
    return flat.reshape(shape)


def save_field(path, field: ScalarField) -> None:
    """Field file: header ``x,y,value``, one node per row in row-major order,
    17 significant digits, grid description in a JSON sidecar."""
    g = field.grid
    path = Path(path)
    X, Y = g.meshgrid()
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for x, y, v in zip(X.ravel(), Y.ravel(), field.values.ravel()):
            fh.write(f"{x:.17g},{y:.17g},{v:.17g}\n")
    sidecar = {
        "h": g.h,
        "nx": g.nx,
        "ny": g.ny,
        "origin": [g.origin[0], g.origin[1]],
        "mask_rle": _rle(g.mask),
    }
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_field(path) -> ScalarField:
    path = Path(path)
    with open(path.with_name(path.name + ".json")) as fh:
        side = json.load(fh)
    grid = Grid2D(
        h=float(side["h"]),
        nx=int(side["nx"]),
        ny=int(side["ny"]),
        origin=(float(side["origin"][0]), float(side["origin"][1])),
        mask=_unrle(side["mask_rle"], (int(side["ny"]), int(side["nx"]))),
    )
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    values = data[:, 2].reshape(grid.ny, grid.nx)
    return ScalarField(grid=grid, values=values)
