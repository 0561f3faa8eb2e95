"""One-dimensional convex-analysis bundle for radial energy densities.

Everything in this module lives on the scalar profile ``rho -> f(rho)`` of a
radial energy density ``f(|grad u|)``: the smooth-growth base profile, the
two families of smoothed approximants, the dimensionless ellipticity ratio
``rho f''(rho) / f'(rho)``, the convex (Fenchel) conjugate, and the limit
coefficient of the conjugate-side equations.

All evaluators are vectorised; profiles are immutable after construction and
every operation is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "Lagrangian",
    "AlphaProfile",
    "ConjugatePair",
    "ApproxFamily",
    "InversionError",
    "UndefinedDerivativeError",
    "FitFailureError",
    "make_case_study",
    "alpha_of",
    "alpha_profile",
    "conjugate",
    "approx_lagrangian",
    "beta_limit",
    "growth_constants",
]


class InversionError(RuntimeError):
    """Monotone inversion of the slope profile failed."""


class UndefinedDerivativeError(RuntimeError):
    """Second derivative is not available at the requested point."""


class FitFailureError(RuntimeError):
    """No polynomial growth sandwich could be fitted on the samples."""


@dataclass(frozen=True)
class Lagrangian:
    """Convex radial integrand bundle.

    ``f`` is the energy density per unit area on ``[0, inf)``, ``fp`` its
    first derivative, ``fpp`` its second derivative on ``(0, inf)``.
    ``fp0 == fp(0)``; it is positive for the base profile (the source of
    non-differentiability of the energy) and zero for approximants.
    ``alpha0`` is the limit of ``rho*fpp/fp`` at ``rho = 0`` (zero whenever
    ``fp0 > 0``).

    The local Hoelder regularity of ``fpp`` plays no computational role here
    and is not modelled.
    """

    f: Callable[[np.ndarray], np.ndarray]
    fp: Callable[[np.ndarray], np.ndarray]
    fpp: Callable[[np.ndarray], np.ndarray]
    fp0: float
    alpha0: float = 0.0
    label: str = ""


@dataclass(frozen=True)
class AlphaProfile:
    """Ellipticity ratio ``alpha(rho) = rho f''(rho)/f'(rho)`` and its limit
    at infinity."""

    alpha: Callable[[np.ndarray], np.ndarray]
    alpha_inf: float


@dataclass(frozen=True)
class ConjugatePair:
    """Fenchel conjugate ``g`` of a profile together with ``g' = (f')^{-1}``.

    ``gp`` vanishes on ``[0, fp0]`` and inverts ``fp`` above.
    """

    g: Callable[[np.ndarray], np.ndarray]
    gp: Callable[[np.ndarray], np.ndarray]
    fp0: float


@dataclass(frozen=True)
class ApproxFamily:
    """Member of one of the two smoothing families.

    Kind ``"a"`` uses the cutoff ``1 - (1 - rho^(1/n))^n`` on [0, 1]; kind
    ``"b"`` uses ``1 - (1 - rho^s)^n``.  Both are identically 1 for
    ``rho >= 1``, so the smoothed profile differs from the base only near 0.
    """

    kind: str
    n: int
    base: Lagrangian
    s: float | None = None

    def __post_init__(self) -> None:
        kind = self.kind.lower()
        if kind not in ("a", "b"):
            raise ValueError(f"unknown family kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.n < 1 or int(self.n) != self.n:
            raise ValueError("family index n must be a positive integer")
        if kind == "b":
            if self.s is None or self.s <= 0:
                raise ValueError("kind 'b' needs a positive exponent s")


def make_case_study() -> Lagrangian:
    """Base profile ``f(rho) = (rho*sqrt(1+rho^2) + asinh(rho)) / 2``.

    Strictly convex with quadratic growth, slope ``sqrt(1+rho^2)`` and
    ``f'(0) = 1 > 0``.
    """

    def f(rho):
        rho = np.asarray(rho, dtype=float)
        return 0.5 * (rho * np.sqrt(1.0 + rho * rho) + np.arcsinh(rho))

    def fp(rho):
        rho = np.asarray(rho, dtype=float)
        return np.sqrt(1.0 + rho * rho)

    def fpp(rho):
        rho = np.asarray(rho, dtype=float)
        return rho / np.sqrt(1.0 + rho * rho)

    return Lagrangian(f=f, fp=fp, fpp=fpp, fp0=1.0, alpha0=0.0, label="case-study")


def alpha_of(L: Lagrangian, rho) -> np.ndarray | float:
    """Ellipticity ratio ``rho*f''(rho)/f'(rho)``, with its limit at 0.

    Raises :class:`UndefinedDerivativeError` if ``fpp`` is not finite at a
    requested positive abscissa.
    """
    arr = np.asarray(rho, dtype=float)
    if np.any(arr < 0):
        raise ValueError("rho must be nonnegative")
    out = np.full(arr.shape, L.alpha0, dtype=float)
    pos = arr > 0
    if np.any(pos):
        rp = arr[pos]
        second = np.asarray(L.fpp(rp), dtype=float)
        if not np.all(np.isfinite(second)):
            raise UndefinedDerivativeError(
                "second derivative unavailable at some requested points"
            )
        out[pos] = rp * second / np.asarray(L.fp(rp), dtype=float)
    return out if arr.ndim else float(out)


def alpha_profile(L: Lagrangian, rho_large: float = 1e9) -> AlphaProfile:
    """Bundle the ratio with its (sampled) limit at infinity."""
    return AlphaProfile(
        alpha=lambda r: alpha_of(L, r),
        alpha_inf=float(alpha_of(L, rho_large)),
    )


def _invert_fp(L: Lagrangian, r, bisect_iters: int = 90, secant_iters: int = 3):
    """Solve ``fp(x) = r`` for ``r > fp0`` (0 below): bracketed bisection in
    the log of the abscissa (roots of smoothed profiles can sit hundreds of
    decades below 1) refined by secant steps."""
    arr = np.asarray(r, dtype=float)
    out = np.zeros(arr.shape, dtype=float)
    m = arr > L.fp0
    if np.any(m):
        target = arr[m]
        hi = np.ones_like(target)
        for _ in range(1020):
            low = np.asarray(L.fp(hi), dtype=float) < target
            if not np.any(low):
                break
            if np.any(hi[low] > 1e300):
                raise InversionError("could not bracket the slope inverse")
            hi[low] *= 2.0
        else:
            raise InversionError("could not bracket the slope inverse")
        tlo = np.full_like(target, np.log(1e-300))
        thi = np.log(hi)
        for _ in range(bisect_iters):
            tmid = 0.5 * (tlo + thi)
            below = np.asarray(L.fp(np.exp(tmid)), dtype=float) < target
            tlo = np.where(below, tmid, tlo)
            thi = np.where(below, thi, tmid)
        lo, hi = np.exp(tlo), np.exp(thi)
        flo = np.asarray(L.fp(lo), dtype=float)
        fhi = np.asarray(L.fp(hi), dtype=float)
        for _ in range(secant_iters):
            denom = fhi - flo
            good = (denom > 0) & np.isfinite(denom)
            x = np.where(good, lo + (target - flo) * (hi - lo) / np.where(good, denom, 1.0), 0.5 * (lo + hi))
            x = np.clip(x, lo, hi)
            fx = np.asarray(L.fp(x), dtype=float)
            below = fx < target
            lo = np.where(below, x, lo)
            flo = np.where(below, fx, flo)
            hi = np.where(below, hi, x)
            fhi = np.where(below, fhi, fx)
        out[m] = 0.5 * (lo + hi)
    return out if arr.ndim else float(out)


def conjugate(L: Lagrangian, r_max: float, tol: float = 1e-12) -> ConjugatePair:
    """Fenchel conjugate ``g(r) = sup {rho*r - f(rho)}`` with its derivative.

    The supremum is bracketed through monotone inversion of ``fp``; the pair
    is validated so that ``|fp(gp(r)) - r| <= tol`` on ``[fp0 + 1e-6,
    r_max]`` (slope roots of sharply smoothed profiles underflow float64
    for r closer to fp0, where gp degrades gracefully towards 0).  Raises
    :class:`InversionError` if ``fp`` is not strictly increasing on the
    bracketing interval or the tolerance cannot be met.
    """
    if r_max <= L.fp0:
        raise ValueError("r_max must exceed fp(0)")
    rho_hi = float(_invert_fp(L, r_max)) * 1.05 + 1e-6
    grid = np.linspace(0.0, rho_hi, 4096)
    slopes = np.asarray(L.fp(grid), dtype=float)
    if not np.all(np.diff(slopes) > 0):
        raise InversionError("slope profile is not strictly increasing on the bracket")

    def gp(r):
        return _invert_fp(L, r)

    def g(r):
        rs = np.asarray(_invert_fp(L, r), dtype=float)
        return rs * np.asarray(r, dtype=float) - np.asarray(L.f(rs), dtype=float)

    check = np.linspace(L.fp0 + 1e-6, r_max, 257)
    resid = np.max(np.abs(np.asarray(L.fp(gp(check)), dtype=float) - check))
    if not resid <= tol:
        raise InversionError(f"inversion residual {resid:.3e} exceeds tol {tol:.3e}")
    return ConjugatePair(g=g, gp=gp, fp0=L.fp0)


def _sigma_pair(fam: ApproxFamily):
    """Closed-form cutoff ``sigma`` and its derivative for a family member."""
    n = float(fam.n)
    if fam.kind == "a":
        expo = 1.0 / n
    else:
        expo = float(fam.s)

    def sigma(rho):
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore"):
            logr = np.log(rho)
        t = np.exp(expo * logr)  # rho**expo, exact 0 at rho=0
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = np.where(t < 1.0, -np.expm1(n * np.log1p(-np.minimum(t, 1.0))), 1.0)
        return np.where(rho >= 1.0, 1.0, inner)

    def sigma_prime(rho):
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore"):
            logr = np.log(rho)
        t = np.exp(expo * logr)
        with np.errstate(divide="ignore", invalid="ignore"):
            lead = math.log(n * expo) if fam.kind == "b" else 0.0
            body = np.exp(lead + (expo - 1.0) * logr + (n - 1.0) * np.log1p(-np.minimum(t, 1.0 - 1e-300)))
        return np.where(rho >= 1.0, 0.0, body)

    return sigma, sigma_prime


def _adaptive_simpson(fn, a: float, b: float, tol: float, depth: int = 42) -> float:
    fa, fm, fb = fn(a), fn(0.5 * (a + b)), fn(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = fn(lm), fn(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return rec(a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(
            m, b, fm, frm, fb, right, 0.5 * tol, depth - 1
        )

    return rec(a, b, fa, fm, fb, whole, tol, depth)


def approx_lagrangian(fam: ApproxFamily) -> Lagrangian:
    """Smoothed profile with slope ``sigma_n * fp`` and ``fp(0) = 0``.

    The slope and curvature are closed-form; the density itself is recovered
    by adaptive Simpson quadrature of the slope from 0 (absolute tolerance
    1e-12 overall) tabulated on a cubic spline over [0, 1].  Beyond 1 the
    cutoff is identically 1, so the density equals the base density minus a
    constant and is evaluated exactly.
    """
    base = fam.base
    sigma, sigma_prime = _sigma_pair(fam)

    def fp(rho):
        rho = np.asarray(rho, dtype=float)
        return sigma(rho) * np.asarray(base.fp(rho), dtype=float)

    def fpp(rho):
        rho = np.asarray(rho, dtype=float)
        return sigma_prime(rho) * np.asarray(base.fp(rho), dtype=float) + sigma(
            rho
        ) * np.asarray(base.fpp(rho), dtype=float)

    # knot set: 1e-3 spacing plus geometric refinement near the endpoint 0,
    # where kind "a" has a rho**(1/n) slope onset
    knots = np.unique(
        np.concatenate(
            [[0.0], np.geomspace(1e-9, 1e-3, 80), np.linspace(1e-3, 1.0, 1000)]
        )
    )
    scalar_fp = lambda x: float(fp(x))
    pieces = [
        _adaptive_simpson(scalar_fp, float(a), float(b), 1e-13)
        for a, b in zip(knots[:-1], knots[1:])
    ]
    vals = np.concatenate([[0.0], np.cumsum(pieces)]) + float(base.f(0.0))
    spline = CubicSpline(knots, vals, bc_type=((1, 0.0), (1, float(fp(1.0)))))
    shift = float(base.f(1.0)) - float(vals[-1])

    def f(rho):
        rho = np.asarray(rho, dtype=float)
        inside = rho < 1.0
        low = spline(np.clip(rho, 0.0, 1.0))
        high = np.asarray(base.f(rho), dtype=float) - shift
        return np.where(inside, low, high)

    limit = (1.0 / fam.n if fam.kind == "a" else float(fam.s)) + base.alpha0
    tag = f"{base.label}:{fam.kind}{fam.n}" + (f"s{fam.s:g}" if fam.kind == "b" else "")
    return Lagrangian(f=f, fp=fp, fpp=fpp, fp0=0.0, alpha0=limit, label=tag)


def beta_limit(L: Lagrangian, s: float, r) -> np.ndarray | float:
    """Limit coefficient of the conjugate-side equation for kind-"b" cutoffs.

    On ``[0, fp0]`` this is ``-s * (fp0 - r)/r * log(1 - r/fp0)``; above
    ``fp0`` it continues as ``alpha(gp(r))``.  The formula's own limits are
    used at the endpoints: value ``s`` at ``r = 0`` and 0 at ``r = fp0``.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    arr = np.asarray(r, dtype=float)
    if np.any(arr < 0):
        raise ValueError("r must be nonnegative")
    out = np.empty(arr.shape, dtype=float)
    fp0 = L.fp0
    low = (arr > 0) & (arr < fp0)
    out[arr == 0] = s
    out[arr == fp0] = 0.0
    if np.any(low):
        rl = arr[low]
        out[low] = -s * (fp0 - rl) / rl * np.log1p(-rl / fp0)
    high = arr > fp0
    if np.any(high):
        rho_star = _invert_fp(L, arr[high])
        out[high] = np.asarray(alpha_of(L, rho_star), dtype=float)
    return out if arr.ndim else float(out)


def growth_constants(
    L: Lagrangian, rho_max: float, samples: int = 10001, margin: float = 0.15
) -> tuple[float, float, float, float]:
    """Fit a polynomial sandwich ``c1*rho**q1 - c2 <= f <= c1*rho**q2 + c2``.

    Diagnostic log-log regression of the density tail plus a margin; the
    sandwich is verified pointwise on the sample grid only.
    """
    if rho_max < 10.0:
        raise ValueError("rho_max must be at least 10")
    grid = np.linspace(0.0, rho_max, samples)
    fv = np.asarray(L.f(grid), dtype=float)
    if not np.all(np.isfinite(fv)):
        raise FitFailureError("density not finite on the sample grid")
    tail = grid >= max(1.0, rho_max / 4.0)
    coeff = np.polyfit(np.log(grid[tail]), np.log(np.maximum(fv[tail], 1e-300)), 1)
    q_fit, logc = float(coeff[0]), float(coeff[1])
    q1 = max(1.0 + 1e-6, q_fit - margin)
    q2 = q_fit + margin
    if not q1 < q2:
        raise FitFailureError(f"fitted exponent {q_fit:.3f} leaves no room above 1")
    c1 = math.exp(logc)
    lower_gap = np.max(c1 * grid**q1 - fv)
    upper_gap = np.max(fv - c1 * grid**q2)
    c2 = max(lower_gap, upper_gap, 0.0) * (1.0 + 1e-12) + 1e-9
    ok = np.all(c1 * grid**q1 - c2 <= fv) and np.all(fv <= c1 * grid**q2 + c2)
    if not ok:
        raise FitFailureError("sandwich verification failed on samples")
    return q1, q2, c1, c2
