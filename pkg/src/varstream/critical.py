"""Critical-set detection, winding-number indices, level-branch counts and
the curvature diagnostics tied to them.

The index of an isolated zero of the gradient field is the winding number of
the gradient direction along a small loop; for a level set splitting into L
curves through the point it equals 1 - L.  Solutions of the degenerate
equations can only realise index 0, which is what the detectors are built to
exhibit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
from skimage import measure

from .grid import Grid2D, ScalarField, active_cells, bilinear, cell_gradients, gradient, hessian
from .lagrangian import Lagrangian, alpha_of

__all__ = [
    "CriticalReport",
    "LoopSpec",
    "ZeroGradientOnLoopError",
    "LoopAliasingError",
    "LoopConstructionError",
    "AmbiguousCrossingError",
    "LevelExtractionError",
    "detect",
    "make_loop",
    "winding_index",
    "branch_count",
    "bernstein_check",
    "coarea_index_identity",
    "node_gradient_norm",
]


class ZeroGradientOnLoopError(RuntimeError):
    """Gradient vanishes (or is undefined) at a loop node."""


class LoopAliasingError(RuntimeError):
    """Successive gradient directions turn too fast to unwrap reliably."""


class LoopConstructionError(ValueError):
    """Requested loop does not fit inside the interior."""


class AmbiguousCrossingError(RuntimeError):
    """Level-crossing sign pattern below tolerance; refusing to guess."""


class LevelExtractionError(RuntimeError):
    """Level curves hit the domain rim; the loop integrals are undefined."""


@dataclass(frozen=True, eq=False)
class CriticalReport:
    """Detected near-critical structure of a nodal field."""

    eps: float
    candidates: list  # [((ix, iy), value), ...]
    components: list  # [[(ix, iy), ...], ...] 4-connected clusters
    isolated: list  # candidate nodes forming single-node components
    indices: dict = field(default_factory=dict)  # node -> integer index
    branches: dict = field(default_factory=dict)  # node -> branch count L
    thetas: dict = field(default_factory=dict)  # node -> crossing angle gaps


@dataclass(frozen=True)
class LoopSpec:
    """Closed counterclockwise lattice loop around a point."""

    center: tuple[float, float]
    radius: float
    nodes: list


def node_gradient_norm(u: ScalarField) -> np.ndarray:
    """Cell-averaged gradient magnitude at nodes (nan where no active cell
    touches the node)."""
    g = u.grid
    act = active_cells(g)
    gx, gy = cell_gradients(g, u.values)
    r = np.where(act, np.hypot(gx, gy), np.nan)
    padded = np.full((g.ny + 1, g.nx + 1), np.nan)
    padded[1:-1, 1:-1] = r
    stack = np.stack(
        [padded[1:, 1:], padded[1:, :-1], padded[:-1, 1:], padded[:-1, :-1]]
    )
    good = np.isfinite(stack)
    count = good.sum(axis=0)
    total = np.where(good, stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def default_eps(u: ScalarField) -> float:
    """10 h times the largest cell gradient: the continuum critical set must
    be thickened at grid scale to be visible."""
    g = u.grid
    act = active_cells(g)
    gx, gy = cell_gradients(g, u.values)
    sup = float(np.max(np.where(act, np.hypot(gx, gy), 0.0)))
    return 10.0 * g.h * max(sup, 1e-12)


def detect(u: ScalarField, eps: float) -> CriticalReport:
    """Interior nodes whose cell-averaged |grad u| falls below eps, clustered
    into 4-connected components.

    A candidate is isolated when its component is a single node and no other
    candidate sits in its 5x5 neighbourhood.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = u.grid
    rho = node_gradient_norm(u)
    with np.errstate(invalid="ignore"):
        cand = g.interior & (rho < eps)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, ncomp = scipy.ndimage.label(cand, structure=structure)
    components = []
    for k in range(1, ncomp + 1):
        nodes = [(int(ix), int(iy)) for iy, ix in np.argwhere(labels == k)]
        components.append(sorted(nodes))
    candidates = sorted(
        ((int(ix), int(iy)), float(rho[iy, ix])) for iy, ix in np.argwhere(cand)
    )
    isolated = []
    for comp in components:
        if len(comp) != 1:
            continue
        ix, iy = comp[0]
        window = cand[max(iy - 2, 0) : iy + 3, max(ix - 2, 0) : ix + 3]
        if int(window.sum()) == 1:
            isolated.append((ix, iy))
    return CriticalReport(
        eps=float(eps), candidates=candidates, components=components, isolated=isolated
    )


def make_loop(grid: Grid2D, center: tuple[float, float], radius: float) -> LoopSpec:
    """Counterclockwise square lattice ring of Chebyshev radius ~ radius/h
    around the node nearest to center; all ring nodes must be interior."""
    icx, icy = grid.nearest_node(*center)
    k = max(2, int(round(radius / grid.h)))
    right = [(icx + k, icy + j) for j in range(-k, k)]
    top = [(icx + i, icy + k) for i in range(k, -k, -1)]
    left = [(icx - k, icy + j) for j in range(k, -k, -1)]
    bottom = [(icx + i, icy - k) for i in range(-k, k, 1)]
    nodes = right + top + left + bottom
    for ix, iy in nodes:
        if not (0 <= ix < grid.nx and 0 <= iy < grid.ny) or not grid.interior[iy, ix]:
            raise LoopConstructionError("loop leaves the interior")
    return LoopSpec(center=center, radius=radius, nodes=nodes)


def _wrap(a: np.ndarray | float):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def winding_index(u: ScalarField, loop: LoopSpec) -> tuple[int, float]:
    """Winding number of the gradient direction along the loop.

    Angle increments are unwrapped atan2 differences; whenever a step turns
    by pi/2 or more the edge is subdivided (gradient components interpolated
    bilinearly) until it does not, which prevents aliasing.  Returns the
    rounded integer index and the raw real value.
    """
    g = u.grid
    vf = gradient(u)
    pts = [(float(ix), float(iy)) for ix, iy in loop.nodes]
    if pts[0] != pts[-1]:
        pts = pts + [pts[0]]

    def grad_at(p):
        gx = float(bilinear(vf.vx, p[0], p[1]))
        gy = float(bilinear(vf.vy, p[0], p[1]))
        return gx, gy

    vals = [grad_at(p) for p in pts]
    for (gx, gy) in vals:
        if not np.isfinite(gx) or not np.isfinite(gy) or gx * gx + gy * gy == 0.0:
            raise ZeroGradientOnLoopError("gradient vanishes on the loop")
    total = 0.0
    for k in range(len(pts) - 1):
        stack = [(pts[k], vals[k], pts[k + 1], vals[k + 1], 0)]
        while stack:
            p1, v1, p2, v2, depth = stack.pop()
            d = _wrap(np.arctan2(v2[1], v2[0]) - np.arctan2(v1[1], v1[0]))
            if abs(d) < 0.5 * np.pi:
                total += d
                continue
            if depth >= 16:
                raise LoopAliasingError("gradient direction turns too fast on an edge")
            mid = (0.5 * (p1[0] + p2[0]), 0.5 * (p1[1] + p2[1]))
            vm = grad_at(mid)
            if vm[0] * vm[0] + vm[1] * vm[1] == 0.0 or not np.all(np.isfinite(vm)):
                raise ZeroGradientOnLoopError("gradient vanishes on a refined loop point")
            stack.append((mid, vm, p2, v2, depth + 1))
            stack.append((p1, v1, mid, vm, depth + 1))
    raw = total / (2.0 * np.pi)
    return int(round(raw)), raw


def _circle_values(u: ScalarField, center, radius, samples):
    g = u.grid
    cx = (center[0] - g.origin[0]) / g.h
    cy = (center[1] - g.origin[1]) / g.h
    th = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
    xi = cx + (radius / g.h) * np.cos(th)
    yj = cy + (radius / g.h) * np.sin(th)
    V = np.where(g.nonexterior, u.values, np.nan)
    return th, bilinear(V, xi, yj)


def branch_count(
    u: ScalarField,
    center: tuple[float, float],
    radius: float,
    tol: float | None = None,
    eps: float | None = None,
    samples: int = 720,
) -> int:
    """Half the number of sign changes of ``u - u(center)`` around the
    discrete circle: level branches pair up into curves through the point.

    ``center`` must be a detected candidate and the annulus radius/2..radius
    must stay inside the domain.  The crossing tolerance defaults to
    h^2 times the local curvature scale; a sample below tolerance together
    with both neighbours aborts instead of guessing.
    """
    g = u.grid
    node = g.nearest_node(*center)
    rho = node_gradient_norm(u)
    eps_eff = default_eps(u) if eps is None else eps
    val = rho[node[1], node[0]]
    if not np.isfinite(val) or val >= eps_eff:
        raise ValueError("center is not a candidate critical node")
    for rr in (radius, 0.5 * radius):
        th = np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False)
        px = center[0] + rr * np.cos(th)
        py = center[1] + rr * np.sin(th)
        ix = np.round((px - g.origin[0]) / g.h).astype(int)
        iy = np.round((py - g.origin[1]) / g.h).astype(int)
        good = (ix >= 0) & (ix < g.nx) & (iy >= 0) & (iy < g.ny)
        if not np.all(good) or not np.all(g.nonexterior[iy, ix]):
            raise ValueError("annulus radius/2..radius leaves the domain")
    if tol is None:
        H = hessian(u)[node[1], node[0]]
        local = float(np.sqrt(np.nansum(H * H))) if np.all(np.isfinite(H)) else 0.0
        tol = g.h * g.h * max(local, 1.0)
    uc = float(bilinear(np.where(g.nonexterior, u.values, np.nan), *(
        (center[0] - g.origin[0]) / g.h,
        (center[1] - g.origin[1]) / g.h,
    )))
    _, ring = _circle_values(u, center, radius, samples)
    if not np.all(np.isfinite(ring)):
        raise ValueError("circle leaves the sampled domain")
    d = ring - uc
    small = np.abs(d) < tol
    trip = small & np.roll(small, 1) & np.roll(small, -1)
    if np.any(trip):
        raise AmbiguousCrossingError(
            "values within tolerance of the centre level at consecutive samples"
        )
    s = d >= 0
    crossings = int(np.sum(s != np.roll(s, -1)))
    return crossings // 2


def crossing_angles(u, center, radius, samples: int = 720) -> list[float]:
    """Angular gaps between successive level crossings on the circle
    (diagnostic only; they sum to 2 pi whenever crossings exist)."""
    g = u.grid
    uc = float(
        bilinear(
            np.where(g.nonexterior, u.values, np.nan),
            (center[0] - g.origin[0]) / g.h,
            (center[1] - g.origin[1]) / g.h,
        )
    )
    th, ring = _circle_values(u, center, radius, samples)
    d = ring - uc
    s = d >= 0
    where = np.flatnonzero(s != np.roll(s, -1))
    if len(where) < 2:
        return []
    angles = th[where]
    gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))
    return [float(a) for a in gaps]


def bernstein_check(L: Lagrangian, u: ScalarField, eps: float) -> np.ndarray:
    """Pointwise slack of the curvature inequality satisfied by solutions:
    ``-det(H) [alpha + 1/alpha] - |H|_F^2`` (nonnegative means it holds).

    Evaluated at interior nodes with |grad u| > eps and a full Hessian
    neighbourhood; diagnostic only for anything that is not a solution.
    """
    g = u.grid
    vf = gradient(u)
    H = hessian(u)
    rho = np.hypot(vf.vx, vf.vy)
    defined = np.all(np.isfinite(H), axis=(2, 3)) & g.interior & np.isfinite(rho)
    with np.errstate(invalid="ignore"):
        mask = defined & (rho > eps)
    out = np.full(rho.shape, np.nan)
    if not np.any(mask):
        return out
    a = np.asarray(alpha_of(L, rho[mask]), dtype=float)
    Hm = H[mask]
    det = Hm[:, 0, 0] * Hm[:, 1, 1] - Hm[:, 0, 1] * Hm[:, 1, 0]
    frob2 = Hm[:, 0, 0] ** 2 + 2 * Hm[:, 0, 1] ** 2 + Hm[:, 1, 1] ** 2
    out[mask] = -det * (a + 1.0 / a) - frob2
    return out


def coarea_index_identity(
    u: ScalarField, eps: float, eps0: float, t_samples: int = 32
) -> tuple[float, float]:
    """Both sides of the curvature/winding identity on the gradient annulus
    ``{eps < |grad u| < eps0}``.

    Left: area sum of ``det(H)/|grad u|``.  Right: the loop integral of the
    gradient-direction winding form along extracted level curves of
    ``|grad u|``, integrated over the level in (eps, eps0) by the midpoint
    rule.  Curves are extracted by marching squares; hitting the rim raises
    :class:`LevelExtractionError`.
    """
    if not 0 < eps < eps0:
        raise ValueError("need 0 < eps < eps0")
    g = u.grid
    vf = gradient(u)
    H = hessian(u)
    rho = np.hypot(vf.vx, vf.vy)
    defined = np.all(np.isfinite(H), axis=(2, 3)) & g.interior & np.isfinite(rho)
    band = defined & (rho > eps) & (rho < eps0)
    if not np.any(band):
        raise ValueError("empty gradient annulus")
    det = H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] * H[..., 1, 0]
    lhs = float(np.sum(det[band] / rho[band]) * g.h * g.h)

    rho_img = np.where(g.interior, rho, np.nan)
    mask = np.isfinite(rho_img)
    dt = (eps0 - eps) / t_samples
    ts = eps + dt * (np.arange(t_samples) + 0.5)
    rhs = 0.0
    for t in ts:
        contours = measure.find_contours(rho_img, t, mask=mask)
        for cont in contours:
            # find_contours returns (row, col) points
            if not np.allclose(cont[0], cont[-1], atol=1e-8):
                raise LevelExtractionError("open level curve reaches the rim")
            gx = bilinear(vf.vx, cont[:, 1], cont[:, 0])
            gy = bilinear(vf.vy, cont[:, 1], cont[:, 0])
            if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
                raise LevelExtractionError("level curve crosses undefined gradient")
            ang = np.arctan2(gy, gx)
            # contour points are (row, col); traversing them in the (x, y)
            # plane reverses the orientation, hence the sign flip
            rhs -= float(np.sum(_wrap(np.diff(ang)))) * dt
    return lhs, rhs
