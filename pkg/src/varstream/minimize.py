"""Discrete energy assembly and constrained minimization.

The energy of a nodal field is the exact integral of ``f(|grad u|)`` over the
piecewise-linear interpolant on a fixed triangulation (every grid square is
split along its SW-NE diagonal), so the discrete functional inherits the
convexity of the density.  Only smoothed profiles (slope 0 at 0) are ever
minimized; the non-smooth base energy is approached through the family limit,
never attacked directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .grid import (
    BoundaryData,
    Grid2D,
    ScalarField,
    active_cells,
    tri_gradients,
)
from .lagrangian import Lagrangian

__all__ = [
    "EnergySpec",
    "SolveReport",
    "BoundaryMismatchError",
    "DegenerateCellError",
    "NonConvergenceError",
    "NonSmoothLagrangianError",
    "energy",
    "harmonic_extension",
    "minimize_smooth",
    "minimize_limit",
    "weak_el_residual",
]


class BoundaryMismatchError(ValueError):
    """Field does not carry the prescribed trace on the boundary ring."""


class DegenerateCellError(RuntimeError):
    """Cells with vanishing gradient where the flux needs a direction."""

    def __init__(self, cells):
        super().__init__(f"{len(cells)} cells with |grad u| below 1e-12")
        self.cells = cells


class NonSmoothLagrangianError(ValueError):
    """Profile with positive slope at 0 passed where a smoothed one is required."""


class NonConvergenceError(RuntimeError):
    """Optimizer stopped above tolerance; carries the last iterate."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True, eq=False)
class EnergySpec:
    """Energy density + lattice + Dirichlet trace."""

    L: Lagrangian
    grid: Grid2D
    bdata: BoundaryData

    def __post_init__(self) -> None:
        if self.bdata.grid is not self.grid and not (
            self.bdata.grid.h == self.grid.h
            and np.array_equal(self.bdata.grid.mask, self.grid.mask)
            and self.bdata.grid.origin == self.grid.origin
        ):
            raise ValueError("boundary data and grid disagree")


@dataclass(frozen=True, eq=False)
class SolveReport:
    u: ScalarField
    energy: float
    iterations: int
    grad_norm: float  # max-norm of the assembled first-order residual
    sup_grad: float  # max |grad u| over triangles of active cells


def _full_values(spec: EnergySpec, interior_x: np.ndarray) -> np.ndarray:
    g = spec.grid
    V = np.where(g.boundary, spec.bdata.values, 0.0)
    V[g.interior] = interior_x
    return V


def _assemble(spec: EnergySpec, V: np.ndarray, want_grad: bool = True):
    """Energy and (optionally) its nodal gradient for exterior-zeroed nodal
    values V.  The gradient at a node is exactly the first-order residual
    assembled from the flux ``fp(|g|) g/|g|`` against that node's hat
    function; cells with |g| = 0 contribute zero flux (exact for smoothed
    profiles)."""
    g = spec.grid
    h = g.h
    area2 = h * h / 2.0
    act = active_cells(g)
    g1x, g1y, g2x, g2y = tri_gradients(g, V)
    r1 = np.hypot(g1x, g1y)
    r2 = np.hypot(g2x, g2y)
    f1 = np.asarray(spec.L.f(r1), dtype=float)
    f2 = np.asarray(spec.L.f(r2), dtype=float)
    E = float(np.sum(np.where(act, f1 + f2, 0.0))) * area2
    if not want_grad:
        return E, None
    with np.errstate(divide="ignore", invalid="ignore"):
        w1 = np.where(act & (r1 > 0), np.asarray(spec.L.fp(r1), dtype=float) / np.where(r1 > 0, r1, 1.0), 0.0) * area2
        w2 = np.where(act & (r2 > 0), np.asarray(spec.L.fp(r2), dtype=float) / np.where(r2 > 0, r2, 1.0), 0.0) * area2
    q1x, q1y = w1 * g1x / h, w1 * g1y / h
    q2x, q2y = w2 * g2x / h, w2 * g2y / h
    G = np.zeros_like(V)
    G[:-1, 1:] += q1x
    G[:-1, :-1] -= q1x
    G[1:, 1:] += q1y
    G[:-1, 1:] -= q1y
    G[1:, 1:] += q2x
    G[1:, :-1] -= q2x
    G[1:, :-1] += q2y
    G[:-1, :-1] -= q2y
    return E, G


def energy(spec: EnergySpec, u: ScalarField) -> float:
    """Exact energy of the piecewise-linear interpolant of ``u``.

    ``u`` must carry the prescribed trace on the boundary ring.
    """
    g = spec.grid
    trace = u.values[g.boundary]
    target = spec.bdata.values[g.boundary]
    scale = 1.0 + float(np.max(np.abs(target)))
    if not np.all(np.isfinite(trace)) or np.max(np.abs(trace - target)) > 1e-8 * scale:
        raise BoundaryMismatchError("field does not match the boundary trace")
    V = np.where(g.nonexterior, u.values, 0.0)
    E, _ = _assemble(spec, V, want_grad=False)
    return E


def harmonic_extension(grid: Grid2D, bdata: BoundaryData) -> ScalarField:
    """5-point discrete harmonic extension of the trace (the default initial
    iterate: respects the maximum principle)."""
    interior = grid.interior
    idx = -np.ones(grid.mask.shape, dtype=np.int64)
    ii = np.argwhere(interior)
    idx[interior] = np.arange(len(ii))
    rows, cols, data = [], [], []
    rhs = np.zeros(len(ii))
    bvals = np.where(grid.boundary, bdata.values, 0.0)
    for k, (j, i) in enumerate(ii):
        rows.append(k)
        cols.append(k)
        data.append(4.0)
        for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            jj, iin = j + dj, i + di
            if interior[jj, iin]:
                rows.append(k)
                cols.append(idx[jj, iin])
                data.append(-1.0)
            else:
                rhs[k] += bvals[jj, iin]
    A = scipy.sparse.csr_matrix((data, (rows, cols)), shape=(len(ii), len(ii)))
    x = scipy.sparse.linalg.spsolve(A, rhs)
    values = np.full(grid.mask.shape, np.nan)
    values[grid.boundary] = bdata.values[grid.boundary]
    values[interior] = x
    return ScalarField(grid=grid, values=values)


def _report(spec: EnergySpec, V: np.ndarray, iterations: int) -> SolveReport:
    g = spec.grid
    E, G = _assemble(spec, V)
    act = active_cells(g)
    g1x, g1y, g2x, g2y = tri_gradients(g, V)
    sup = float(
        max(
            np.max(np.where(act, np.hypot(g1x, g1y), 0.0)),
            np.max(np.where(act, np.hypot(g2x, g2y), 0.0)),
        )
    )
    values = np.where(g.nonexterior, V, np.nan)
    u = ScalarField(grid=g, values=values)
    return SolveReport(
        u=u,
        energy=E,
        iterations=iterations,
        grad_norm=float(np.max(np.abs(G[g.interior]))) if g.interior.any() else 0.0,
        sup_grad=sup,
    )


def _make_hessp(spec: EnergySpec):
    """Exact energy Hessian-vector product, assembled trianglewise.

    Per triangle the second derivative of ``f(|g|)`` in direction d is
    ``fp/r * d + (fpp - fp/r)/r^2 * <g, d> g``; degenerate triangles (r = 0)
    contribute nothing, matching the zero-flux convention.
    """
    g = spec.grid
    h = g.h
    area2 = h * h / 2.0
    act = active_cells(g)
    interior = g.interior

    def hessp(x, v):
        V = _full_values(spec, x)
        W = np.zeros_like(V)
        W[interior] = v
        g1 = tri_gradients(g, V)
        d1 = tri_gradients(g, W)
        out = np.zeros_like(V)
        for which in (0, 1):
            gx, gy = g1[2 * which], g1[2 * which + 1]
            dx, dy = d1[2 * which], d1[2 * which + 1]
            r = np.hypot(gx, gy)
            pos = act & (r > 0)
            rr = np.where(pos, r, 1.0)
            fp = np.asarray(spec.L.fp(rr), dtype=float)
            fpp = np.asarray(spec.L.fpp(rr), dtype=float)
            a = np.where(pos, fp / rr, 0.0)
            b = np.where(pos, (fpp - fp / rr) / (rr * rr), 0.0)
            gd = gx * dx + gy * dy
            qx = (a * dx + b * gd * gx) * area2 / h
            qy = (a * dy + b * gd * gy) * area2 / h
            if which == 0:
                out[:-1, 1:] += qx
                out[:-1, :-1] -= qx
                out[1:, 1:] += qy
                out[:-1, 1:] -= qy
            else:
                out[1:, 1:] += qx
                out[1:, :-1] -= qx
                out[1:, :-1] += qy
                out[:-1, :-1] -= qy
        return out[interior]

    return hessp


def _hess_diag(spec: EnergySpec, V: np.ndarray) -> np.ndarray:
    """Diagonal of the energy Hessian (positive: per-triangle eigenvalues are
    fpp and fp/r), used as a Jacobi preconditioner for the Newton solves."""
    g = spec.grid
    h = g.h
    s = 0.5  # area2 / h^2
    act = active_cells(g)
    g1 = tri_gradients(g, V)
    out = np.zeros_like(V)
    for which in (0, 1):
        gx, gy = g1[2 * which], g1[2 * which + 1]
        r = np.hypot(gx, gy)
        pos = act & (r > 0)
        rr = np.where(pos, r, 1.0)
        fp = np.asarray(spec.L.fp(rr), dtype=float)
        fpp = np.asarray(spec.L.fpp(rr), dtype=float)
        a = np.where(pos, fp / rr, 0.0)
        b = np.where(pos, (fpp - fp / rr) / (rr * rr), 0.0)
        if which == 0:
            out[:-1, :-1] += s * (a + b * gx * gx)
            out[:-1, 1:] += s * (2 * a + b * (gx - gy) ** 2)
            out[1:, 1:] += s * (a + b * gy * gy)
        else:
            out[:-1, :-1] += s * (a + b * gy * gy)
            out[1:, 1:] += s * (a + b * gx * gx)
            out[1:, :-1] += s * (2 * a + b * (gy - gx) ** 2)
    return out


def _newton(spec: EnergySpec, x, tol: float, max_outer: int = 120):
    """Damped Newton with Jacobi-preconditioned CG inner solves.

    The energy is convex, so the Hessian is positive semidefinite and the
    Newton direction is a descent direction; Armijo backtracking guards the
    global phase and steps are accepted outright once predicted decreases
    drop below float resolution of the energy.
    """
    g = spec.grid
    interior = g.interior
    hessp = _make_hessp(spec)
    E, G = _assemble(spec, _full_values(spec, x))
    grad = G[interior]
    n = x.size
    it = 0
    for it in range(1, max_outer + 1):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol:
            return x, it - 1, gnorm
        V = _full_values(spec, x)
        D = np.maximum(_hess_diag(spec, V)[interior], 1e-300)
        Aop = scipy.sparse.linalg.LinearOperator((n, n), matvec=lambda v: hessp(x, v))
        Mop = scipy.sparse.linalg.LinearOperator((n, n), matvec=lambda v: v / D)
        eta = min(0.1, np.sqrt(gnorm))
        delta, _ = scipy.sparse.linalg.cg(
            Aop, -grad, rtol=max(eta, 1e-10), atol=0.0, M=Mop, maxiter=1500
        )
        gd = float(grad @ delta)
        if not np.isfinite(gd) or gd >= 0:
            delta = -grad / D
            gd = float(grad @ delta)
        t = 1.0
        for _ in range(40):
            E2, G2 = _assemble(spec, _full_values(spec, x + t * delta))
            if E2 <= E + 1e-4 * t * gd or abs(t * gd) < 1e-13 * max(abs(E), 1.0):
                break
            t *= 0.5
        x = x + t * delta
        E, grad = E2, G2[interior]
    return x, it, float(np.max(np.abs(grad)))


def _bb_polish(fun, x, tol, max_steps):
    """Barzilai-Borwein gradient steps.

    Near the optimum line searches stall on energy differences below float
    resolution; BB steps use gradients only and push the residual further.
    The best-seen iterate is kept.
    """
    _, g = fun(x)
    best_x, best_n = x.copy(), float(np.max(np.abs(g)))
    t = 1e-3 / max(best_n, 1e-30)
    since_best = 0
    it = 0
    while it < max_steps and best_n > tol:
        x_new = x - t * g
        _, g_new = fun(x_new)
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        t = float(s @ s) / sy if sy > 0 else t * 0.5
        x, g = x_new, g_new
        gn = float(np.max(np.abs(g)))
        it += 1
        if gn < best_n:
            best_x, best_n = x.copy(), gn
            since_best = 0
        else:
            since_best += 1
            if since_best > 400:
                break
    return best_x, it


def minimize_smooth(
    spec: EnergySpec,
    tol: float = 1e-8,
    max_iter: int = 100000,
    x0: ScalarField | None = None,
) -> SolveReport:
    """Minimize the discrete energy over interior nodal values.

    Converged when the assembled first-order residual has max-norm <= tol.
    A short quasi-Newton warmup (L-BFGS) precedes damped Newton with the
    exact Hessian-vector product and Jacobi-preconditioned CG inner solves;
    gradient-only BB steps finish off the rare leftovers.  Raises
    :class:`NonConvergenceError` (carrying the last iterate) if the residual
    stays above tolerance.
    """
    if spec.L.fp0 != 0.0:
        raise NonSmoothLagrangianError(
            "profile has positive slope at 0: minimize a smoothed family member"
        )
    g = spec.grid
    interior = g.interior
    if x0 is None:
        x = harmonic_extension(g, spec.bdata).values[interior].copy()
    else:
        x = x0.values[interior].copy()
        if not np.all(np.isfinite(x)):
            raise ValueError("initial iterate not finite on interior nodes")

    def fun(xv):
        E, G = _assemble(spec, _full_values(spec, xv))
        return E, G[interior]

    # affine traces (constants included) have exact affine minimizers; the
    # fitted plane then starts with exactly vanishing first-order residual,
    # which float noise in a generic initial iterate cannot reach
    ring = np.argwhere(g.boundary)
    xs, ys = g.xs(), g.ys()
    basis = np.stack(
        [xs[ring[:, 1]], ys[ring[:, 0]], np.ones(len(ring))], axis=1
    )
    coef, *_ = np.linalg.lstsq(basis, spec.bdata.values[ring[:, 0], ring[:, 1]], rcond=None)
    # snap negligible slope/offset components to exact zero: a spurious 1e-16
    # coefficient already costs O(1e-2) in the assembled residual because the
    # smoothed profiles turn on steeply at machine-scale gradients
    scale_psi = 1.0 + float(np.max(np.abs(spec.bdata.values[ring[:, 0], ring[:, 1]])))
    spans = np.array([np.ptp(xs) + 1.0, np.ptp(ys) + 1.0, 1.0])
    coef = np.where(np.abs(coef) * spans <= 1e-12 * scale_psi, 0.0, coef)
    X, Y = g.meshgrid()
    plane = (coef[0] * X + coef[1] * Y + coef[2])[interior]
    candidates = [x, plane]
    evals = [fun(c) for c in candidates]
    best = int(np.argmin([e for e, _ in evals]))
    for c, (_, grad_c) in zip(candidates, evals):
        if float(np.max(np.abs(grad_c))) <= tol:
            best = candidates.index(c)
            break
    x = candidates[best]

    total_it = 0
    gnorm = float(np.max(np.abs(fun(x)[1]))) if x.size else 0.0
    if gnorm > tol and x.size:
        res = scipy.optimize.minimize(
            fun,
            x,
            jac=True,
            method="L-BFGS-B",
            options=dict(
                maxiter=min(60, max_iter),
                maxcor=30,
                ftol=1e-18,
                gtol=tol,
            ),
        )
        x = res.x
        total_it += int(res.nit)
        gnorm = float(np.max(np.abs(res.jac)))
    if gnorm > tol and x.size:
        x, newton_it, gnorm = _newton(spec, x, tol, max_outer=max(120, max_iter // 500))
        total_it += newton_it
    if gnorm > tol and total_it < max_iter and x.size:
        x, polish_it = _bb_polish(fun, x, tol, min(max_iter - total_it, 5000))
        total_it += polish_it
    report = _report(spec, _full_values(spec, x), total_it)
    if report.grad_norm > tol:
        raise NonConvergenceError(
            f"first-order residual {report.grad_norm:.3e} > tol {tol:.3e} "
            f"after {total_it} iterations",
            report,
        )
    return report


def minimize_limit(
    specs,
    tol: float = 1e-8,
    max_iter: int = 100000,
) -> tuple[ScalarField, list[SolveReport]]:
    """Run the smoothing family in sequence, warm-starting every member from
    the previous minimizer; the last iterate is the discrete surrogate of the
    non-smooth minimizer."""
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one spec")
    g0 = specs[0].grid
    for s in specs[1:]:
        if s.grid is not g0 and not np.array_equal(s.grid.mask, g0.mask):
            raise ValueError("specs must share the grid")
    trace = []
    warm = None
    for s in specs:
        rep = minimize_smooth(s, tol=tol, max_iter=max_iter, x0=warm)
        trace.append(rep)
        warm = rep.u
    return trace[-1].u, trace


def weak_el_residual(spec: EnergySpec, u: ScalarField) -> float:
    """Max-norm, per unit node mass, of the divergence-form first-order
    residual tested against interior hat functions.

    Needs |grad u| > 0 on every triangle touching an interior node; cells
    below 1e-12 are collected into :class:`DegenerateCellError`.  The raw
    assembled sums are divided by h**2 so that non-solutions stay bounded
    away from zero under refinement.
    """
    g = spec.grid
    V = np.where(g.nonexterior, u.values, 0.0)
    act = active_cells(g)
    g1x, g1y, g2x, g2y = tri_gradients(g, V)
    r1 = np.where(act, np.hypot(g1x, g1y), np.nan)
    r2 = np.where(act, np.hypot(g2x, g2y), np.nan)
    interior = g.interior
    touches = np.zeros_like(act)
    # a cell touches an interior node if any of its 4 corners is interior
    touches |= interior[:-1, :-1] | interior[:-1, 1:] | interior[1:, :-1] | interior[1:, 1:]
    bad = act & touches & ((r1 < 1e-12) | (r2 < 1e-12))
    if np.any(bad):
        raise DegenerateCellError([(int(cx), int(cy)) for cy, cx in np.argwhere(bad)])
    _, G = _assemble(spec, V)
    return float(np.max(np.abs(G[interior]))) / (g.h * g.h)
