"""Pointwise residuals of the second-order degenerate elliptic equations and
a touching-function probe for their weak (viscosity-style) formulation.

Every displayed equation has the shape ``-tr(A(grad w) hess w) = 0`` for a
coefficient matrix ``A(p) = P(|p|) p p^T + K(|p|) |p|^2 I`` (with one
anisotropic exception written out componentwise), so residual evaluation
reduces to choosing the scalar profiles.  The residual is reported raw, with
no normalisation by gradient powers; comparisons across forms are sign and
zero-set based.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import ScalarField, VectorField, gradient, hessian
from .lagrangian import ConjugatePair, Lagrangian, alpha_of, beta_limit

__all__ = [
    "DiffOps",
    "EquationSpec",
    "Quadratic",
    "ProbeVerdict",
    "CoefficientDomainError",
    "NotTouchingError",
    "ZeroFluxError",
    "diff_ops",
    "nondiv_u",
    "case_study_u",
    "approx_u",
    "v_approx",
    "v_limit_beta",
    "v_limit_alpha",
    "residual",
    "infinity_harmonic_region",
    "viscosity_probe",
    "probe_battery",
    "general_m_residual",
    "radial_operator",
]


class CoefficientDomainError(ValueError):
    """Coefficient map requested outside its domain."""


class NotTouchingError(ValueError):
    """Test polynomial does not touch the field from the requested side."""


class ZeroFluxError(RuntimeError):
    """|M(grad w)| = 0 at a node with nonvanishing gradient."""


@dataclass(frozen=True, eq=False)
class DiffOps:
    """Nodal derivative bundle: gradient, Hessian, trace and the
    gradient-squared form ``<H g, g>`` (zero wherever the gradient is)."""

    grad: VectorField
    hess: np.ndarray
    lap: np.ndarray
    inf_lap: np.ndarray


def diff_ops(w: ScalarField) -> DiffOps:
    vf = gradient(w)
    H = hessian(w)
    lap = H[..., 0, 0] + H[..., 1, 1]
    gx, gy = vf.vx, vf.vy
    inf_lap = H[..., 0, 0] * gx * gx + 2 * H[..., 0, 1] * gx * gy + H[..., 1, 1] * gy * gy
    zero = (gx == 0) & (gy == 0) & np.isfinite(H[..., 0, 0])
    inf_lap = np.where(zero, 0.0, inf_lap)
    return DiffOps(grad=vf, hess=H, lap=lap, inf_lap=inf_lap)


@dataclass(frozen=True)
class EquationSpec:
    """Second-order form identified by its coefficient matrix
    ``A(p) -> (A11, A12, A22)``; the residual is ``-tr(A hess)``."""

    form: str
    coeffs: Callable


def _radial_spec(form: str, k_of_rho: Callable) -> EquationSpec:
    """Forms ``-(1-k) inf_lap - k rho^2 lap`` with k = k(rho)."""

    def coeffs(px, py):
        rho2 = px * px + py * py
        k = np.asarray(k_of_rho(np.sqrt(rho2)), dtype=float)
        a11 = (1.0 - k) * px * px + k * rho2
        a12 = (1.0 - k) * px * py
        a22 = (1.0 - k) * py * py + k * rho2
        return a11, a12, a22

    return EquationSpec(form=form, coeffs=coeffs)


def nondiv_u(L: Lagrangian) -> EquationSpec:
    """``-(alpha-1) inf_lap - rho^2 lap``: the non-divergence form of the
    minimization equation, degenerate exactly at critical points."""

    def coeffs(px, py):
        rho2 = px * px + py * py
        a = np.asarray(alpha_of(L, np.sqrt(rho2)), dtype=float)
        a11 = (a - 1.0) * px * px + rho2
        a12 = (a - 1.0) * px * py
        a22 = (a - 1.0) * py * py + rho2
        return a11, a12, a22

    return EquationSpec(form="NONDIV_U", coeffs=coeffs)


def case_study_u() -> EquationSpec:
    """Componentwise polynomial form for the base density: a positive
    multiple (1 + rho^2) of the generic non-divergence form."""

    def coeffs(px, py):
        rho4 = (px * px + py * py) ** 2
        return rho4 + py * py, -px * py, rho4 + px * px

    return EquationSpec(form="CASE_STUDY_U", coeffs=coeffs)


def approx_u(L_n: Lagrangian) -> EquationSpec:
    """Non-divergence form with the smoothed-family ratio."""
    spec = nondiv_u(L_n)
    return EquationSpec(form=f"APPROX_U[{L_n.label}]", coeffs=spec.coeffs)


def v_approx(L_n: Lagrangian, conj_n: ConjugatePair) -> EquationSpec:
    """Conjugate-side equation for the stream function of a smoothed member:
    ``-(1 - a_n(g'(rho))) inf_lap - rho^2 a_n(g'(rho)) lap``."""

    def k(rho):
        return alpha_of(L_n, np.asarray(conj_n.gp(rho), dtype=float))

    return _radial_spec(f"V_APPROX[{L_n.label}]", k)


def v_limit_beta(L: Lagrangian, s: float) -> EquationSpec:
    """Limit conjugate-side equation for the kind-"b" family with exponent s."""
    return _radial_spec(f"V_LIMIT_BETA[s={s:g}]", lambda rho: beta_limit(L, s, rho))


def v_limit_alpha(L: Lagrangian, conj: ConjugatePair) -> EquationSpec:
    """Limit conjugate-side equation for kind-"a" cutoffs: coefficient
    ``alpha(g'(rho))``, identically zero below fp(0) (the infinity-harmonic
    regime)."""

    def k(rho):
        return alpha_of(L, np.asarray(conj.gp(rho), dtype=float))

    return _radial_spec("V_LIMIT_ALPHA", k)


def residual(spec: EquationSpec, w: ScalarField) -> np.ndarray:
    """Left-hand side ``-tr(A(grad w) hess w)`` per node; nan where the full
    Hessian neighbourhood is missing."""
    ops = diff_ops(w)
    defined = np.all(np.isfinite(ops.hess), axis=(2, 3)) & np.isfinite(ops.grad.vx)
    px = np.where(defined, ops.grad.vx, 0.0)
    py = np.where(defined, ops.grad.vy, 0.0)
    try:
        a11, a12, a22 = spec.coeffs(px, py)
    except (ValueError, FloatingPointError) as exc:
        raise CoefficientDomainError(str(exc)) from exc
    H = ops.hess
    res = -(a11 * H[..., 0, 0] + 2.0 * a12 * H[..., 0, 1] + a22 * H[..., 1, 1])
    return np.where(defined, res, np.nan)


def infinity_harmonic_region(v: ScalarField, L: Lagrangian) -> np.ndarray:
    """Nodes where |grad v| <= fp(0): there the limit conjugate-side
    coefficient vanishes and the equation collapses to ``-inf_lap = 0``."""
    vf = gradient(v)
    rho = np.hypot(vf.vx, vf.vy)
    with np.errstate(invalid="ignore"):
        return v.grid.nonexterior & np.isfinite(rho) & (rho <= L.fp0)


@dataclass(frozen=True)
class Quadratic:
    """Test polynomial ``c + <b, z> + z^T A z / 2`` with exact derivatives."""

    c: float
    b: tuple[float, float]
    A: np.ndarray

    def value(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        A = self.A
        return (
            self.c
            + self.b[0] * x
            + self.b[1] * y
            + 0.5 * (A[0, 0] * x * x + 2 * A[0, 1] * x * y + A[1, 1] * y * y)
        )

    def grad(self, x, y):
        A = self.A
        return self.b[0] + A[0, 0] * x + A[0, 1] * y, self.b[1] + A[0, 1] * x + A[1, 1] * y


@dataclass(frozen=True)
class ProbeVerdict:
    holds: bool
    lhs: float
    side: str
    slack: float


def viscosity_probe(
    w: ScalarField,
    phi: Quadratic,
    xhat: tuple[float, float],
    side: str,
    spec: EquationSpec,
    slack: float = 0.0,
    window: int = 2,
) -> ProbeVerdict:
    """Touching-function test at a node.

    ``side="sub"``: phi must touch w from above on the (2*window+1)^2 node
    patch (equality at xhat within 1e-8); the weak formulation then demands
    lhs <= 0 (up to slack).  ``side="super"`` is the mirror image.  The
    left-hand side is evaluated on phi analytically.
    """
    if side not in ("sub", "super"):
        raise ValueError("side must be 'sub' or 'super'")
    g = w.grid
    ix, iy = g.nearest_node(*xhat)
    x0, y0 = g.node_xy(ix, iy)
    if abs(x0 - xhat[0]) > 1e-9 + 1e-12 or abs(y0 - xhat[1]) > 1e-9 + 1e-12:
        raise ValueError("xhat must be a lattice node")
    sl = slice(max(iy - window, 0), iy + window + 1)
    sc = slice(max(ix - window, 0), ix + window + 1)
    patch = w.values[sl, sc]
    if not np.all(np.isfinite(patch)):
        raise NotTouchingError("window leaves the field support")
    X, Y = g.meshgrid()
    diff = phi.value(X[sl, sc], Y[sl, sc]) - patch
    scale = 1.0 + float(np.max(np.abs(patch)))
    if abs(float(phi.value(x0, y0)) - w.values[iy, ix]) > 1e-8 * scale:
        raise NotTouchingError("phi does not meet w at xhat")
    if side == "sub":
        if float(np.min(diff)) < -1e-9 * scale:
            raise NotTouchingError("phi does not dominate w on the window")
    else:
        if float(np.max(diff)) > 1e-9 * scale:
            raise NotTouchingError("phi does not stay below w on the window")
    px, py = phi.grad(x0, y0)
    a11, a12, a22 = spec.coeffs(np.asarray(px), np.asarray(py))
    A = phi.A
    lhs = -float(a11 * A[0, 0] + 2.0 * a12 * A[0, 1] + a22 * A[1, 1])
    holds = lhs <= slack if side == "sub" else lhs >= -slack
    return ProbeVerdict(holds=bool(holds), lhs=lhs, side=side, slack=float(slack))


def radial_operator(L: Lagrangian):
    """Vectorised flux map ``p -> fp(|p|) p/|p|`` (zero at 0) and its
    Jacobian, the divergence-form operator of the energy."""

    def M(P):
        P = np.asarray(P, dtype=float)
        r = np.hypot(P[..., 0], P[..., 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(r > 0, np.asarray(L.fp(np.where(r > 0, r, 1.0)), dtype=float) / np.where(r > 0, r, 1.0), 0.0)
        return P * w[..., None]

    def dM(P):
        P = np.asarray(P, dtype=float)
        r = np.hypot(P[..., 0], P[..., 1])
        pos = r > 0
        rr = np.where(pos, r, 1.0)
        fp = np.asarray(L.fp(rr), dtype=float)
        fpp = np.asarray(L.fpp(rr), dtype=float)
        a = np.where(pos, fp / rr, 0.0)
        b = np.where(pos, (fpp - fp / rr) / (rr * rr), 0.0)
        out = np.zeros(P.shape[:-1] + (2, 2))
        out[..., 0, 0] = a + b * P[..., 0] * P[..., 0]
        out[..., 0, 1] = b * P[..., 0] * P[..., 1]
        out[..., 1, 0] = out[..., 0, 1]
        out[..., 1, 1] = a + b * P[..., 1] * P[..., 1]
        return out

    return M, dM


def probe_battery(
    w: ScalarField,
    spec: EquationSpec,
    n_nodes: int,
    trials_per_side: int,
    seed: int,
    slack: float,
) -> dict:
    """Seeded battery of touching-quadratic probes at random interior nodes.

    Quadratics take the finite-difference gradient of ``w`` as their linear
    part and the finite-difference Hessian shifted by a random (anti)definite
    matrix as their curvature, so they genuinely touch from the requested
    side; candidates failing the touching precondition on the window are
    resampled.  Returns counts and any failing verdicts.
    """
    from .grid import gradient as _gradient
    from .grid import hessian as _hessian

    g = w.grid
    rng = np.random.default_rng(seed)
    H = _hessian(w)
    vf = _gradient(w)
    eligible = np.argwhere(
        g.interior & np.all(np.isfinite(H), axis=(2, 3)) & np.isfinite(vf.vx)
    )
    take = min(n_nodes, len(eligible))
    nodes = eligible[rng.choice(len(eligible), size=take, replace=False)]
    results = {"nodes": take, "trials": 0, "passed": 0, "failures": []}
    for j, i in nodes:
        xy = g.node_xy(int(i), int(j))
        Hn = H[j, i]
        b = (float(vf.vx[j, i]), float(vf.vy[j, i]))
        scale = max(1.0, float(np.max(np.abs(Hn))))
        for side, sign in (("sub", 1.0), ("super", -1.0)):
            done = 0
            attempts = 0
            while done < trials_per_side and attempts < 40 * trials_per_side:
                attempts += 1
                ang = rng.uniform(0.0, 2.0 * np.pi)
                c_, s_ = np.cos(ang), np.sin(ang)
                rot = np.array([[c_, -s_], [s_, c_]])
                lam = rng.uniform(0.1, 2.0, size=2) * scale
                A = Hn + sign * (rot @ np.diag(lam) @ rot.T)
                lin = (
                    b[0] - A[0, 0] * xy[0] - A[0, 1] * xy[1],
                    b[1] - A[0, 1] * xy[0] - A[1, 1] * xy[1],
                )
                cval = float(w.values[j, i]) - (
                    lin[0] * xy[0]
                    + lin[1] * xy[1]
                    + 0.5 * float(np.array(xy) @ A @ np.array(xy))
                )
                phi = Quadratic(c=cval, b=lin, A=A)
                try:
                    verdict = viscosity_probe(w, phi, xy, side, spec, slack=slack)
                except NotTouchingError:
                    continue
                done += 1
                results["trials"] += 1
                if verdict.holds:
                    results["passed"] += 1
                else:
                    results["failures"].append(
                        {"node": [int(i), int(j)], "side": side, "lhs": verdict.lhs}
                    )
    return results


def general_m_residual(M: Callable, dM: Callable, w: ScalarField) -> np.ndarray:
    """``-(|grad w|^3 / |M(grad w)|) tr(dM(grad w) hess w)`` per node.

    Zero where the gradient vanishes; raises :class:`ZeroFluxError` when the
    flux vanishes against a nonvanishing gradient.
    """
    ops = diff_ops(w)
    defined = np.all(np.isfinite(ops.hess), axis=(2, 3)) & np.isfinite(ops.grad.vx)
    P = np.stack([np.where(defined, ops.grad.vx, 0.0), np.where(defined, ops.grad.vy, 0.0)], axis=-1)
    r = np.hypot(P[..., 0], P[..., 1])
    m = np.asarray(M(P), dtype=float)
    mnorm = np.hypot(m[..., 0], m[..., 1])
    bad = defined & (r > 0) & (mnorm == 0.0)
    if np.any(bad):
        raise ZeroFluxError(f"flux vanishes at {int(bad.sum())} nodes with grad != 0")
    J = np.asarray(dM(P), dtype=float)
    H = ops.hess
    tr = (
        J[..., 0, 0] * H[..., 0, 0]
        + J[..., 0, 1] * H[..., 1, 0]
        + J[..., 1, 0] * H[..., 0, 1]
        + J[..., 1, 1] * H[..., 1, 1]
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        res = np.where(r > 0, -(r**3) / np.where(mnorm > 0, mnorm, 1.0) * tr, 0.0)
    return np.where(defined, res, np.nan)
