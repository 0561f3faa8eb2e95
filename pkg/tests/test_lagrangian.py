import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varstream.lagrangian import (
    ApproxFamily,
    FitFailureError,
    InversionError,
    Lagrangian,
    alpha_of,
    alpha_profile,
    approx_lagrangian,
    beta_limit,
    conjugate,
    growth_constants,
    make_case_study,
)

# high-precision evaluations of the closed forms, frozen as oracles
F_AT_1 = 1.14779357469631903701714902459  # (sqrt(2) + log(1+sqrt(2))) / 2
G_AT_2 = 1.07357185910646893921492316785  # (2 sqrt(3) - log(2+sqrt(3))) / 2


@pytest.fixture(scope="module")
def L():
    return make_case_study()


@pytest.fixture(scope="module")
def conj(L):
    return conjugate(L, 25.0)


class TestCaseStudy:
    def test_values_at_zero(self, L):
        assert L.f(0.0) == 0.0
        assert L.fp(0.0) == 1.0
        assert L.fp0 == 1.0

    def test_value_at_one(self, L):
        assert float(L.f(1.0)) == pytest.approx(F_AT_1, abs=1e-15)

    def test_slope_strictly_increasing(self, L):
        rho = np.linspace(0.0, 50.0, 4001)
        assert np.all(np.diff(L.fp(rho)) > 0)

    def test_derivative_consistency(self, L):
        # central differences of f reproduce fp to O(step^2)
        rho = np.linspace(0.1, 5.0, 23)
        for d in (1e-3, 5e-4):
            fd = (np.asarray(L.f(rho + d)) - np.asarray(L.f(rho - d))) / (2 * d)
            assert np.max(np.abs(fd - L.fp(rho))) < 0.2 * d * d


class TestAlpha:
    def test_limit_at_zero(self, L):
        assert alpha_of(L, 0.0) == 0.0

    def test_at_one(self, L):
        # analytic value rho^2/(1+rho^2); finite-difference oracle agrees
        assert alpha_of(L, 1.0) == pytest.approx(0.5, abs=1e-12)
        d = 1e-5
        fpp_fd = (float(L.fp(1 + d)) - float(L.fp(1 - d))) / (2 * d)
        assert alpha_of(L, 1.0) == pytest.approx(1.0 * fpp_fd / float(L.fp(1.0)), abs=1e-9)

    def test_limit_at_infinity(self, L):
        assert abs(alpha_of(L, 1e3) - 1.0) < 1e-5
        prof = alpha_profile(L)
        assert prof.alpha_inf == pytest.approx(1.0, abs=1e-12)

    def test_positive_on_positive_axis(self, L):
        rho = np.geomspace(1e-6, 1e6, 100)
        assert np.all(np.asarray(alpha_of(L, rho)) > 0)


class TestConjugate:
    def test_below_slope_at_zero(self, conj):
        assert float(conj.g(0.5)) == 0.0
        assert float(conj.gp(0.5)) == 0.0

    def test_inverse_at_two(self, L, conj):
        # oracle: bisection on sqrt(1+rho^2) = 2 gives sqrt(3)
        lo, hi = 0.0, 4.0
        for _ in range(80):
            mid = (lo + hi) / 2
            if float(L.fp(mid)) < 2.0:
                lo = mid
            else:
                hi = mid
        assert float(conj.gp(2.0)) == pytest.approx((lo + hi) / 2, abs=1e-12)
        assert float(conj.gp(2.0)) == pytest.approx(np.sqrt(3.0), abs=1e-12)

    def test_value_at_two_brute_force(self, L, conj):
        rho = np.arange(0.0, 10.0, 1e-4)
        brute = float(np.max(2.0 * rho - np.asarray(L.f(rho))))
        assert float(conj.g(2.0)) == pytest.approx(brute, abs=1e-7)
        assert float(conj.g(2.0)) == pytest.approx(G_AT_2, abs=1e-12)

    def test_inversion_error_on_decreasing_profile(self):
        bad = Lagrangian(
            f=lambda r: -np.asarray(r, float),
            fp=lambda r: -np.ones_like(np.asarray(r, float)),
            fpp=lambda r: np.zeros_like(np.asarray(r, float)),
            fp0=-1.0,
        )
        with pytest.raises(InversionError):
            conjugate(bad, 25.0)

    def test_ratio_identity(self, L):
        # r g''(r)/g'(r) is the reciprocal of the ellipticity ratio at g'(r)
        for member in (L, approx_lagrangian(ApproxFamily("b", 4, L, s=1.0))):
            conj_m = conjugate(member, 8.0)
            rs = np.geomspace(member.fp0 + 1e-6, 5.0, 100) if member.fp0 else np.geomspace(1e-3, 5.0, 100)
            for r in rs:
                d = min(1e-4 * max(r, 1.0), (r - member.fp0) / 3)
                gpp = (float(conj_m.gp(r + d)) - float(conj_m.gp(r - d))) / (2 * d)
                ratio = r * gpp / float(conj_m.gp(r))
                assert abs(float(alpha_of(member, float(conj_m.gp(r)))) - 1.0 / ratio) < 1e-6


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.0, 30.0), b=st.floats(0.0, 30.0))
def test_fenchel_young_inequality(a, b):
    L = make_case_study()
    conj = conjugate(L, 40.0)
    lhs = float(L.f(a)) + float(conj.g(b))
    assert lhs >= a * b - 1e-9
    # equality at the conjugate pairing b = fp(a)
    bstar = float(L.fp(a))
    assert float(L.f(a)) + float(conj.g(bstar)) - a * bstar == pytest.approx(0.0, abs=1e-9)


class TestApproxFamilies:
    def test_cutoff_saturates(self, L):
        for n in (1, 3, 7):
            Ln = approx_lagrangian(ApproxFamily("a", n, L))
            assert float(Ln.fp(1.0)) == pytest.approx(float(L.fp(1.0)), rel=1e-14)
            assert float(Ln.fp(2.5)) == pytest.approx(float(L.fp(2.5)), rel=1e-14)

    def test_slope_vanishes_at_zero(self, L):
        for kind, s in (("a", None), ("b", 2.0)):
            Ln = approx_lagrangian(ApproxFamily(kind, 4, L, s=s))
            assert Ln.fp(0.0) == 0.0
            assert Ln.fp0 == 0.0

    def test_kind_a_n1_is_linear_cutoff(self, L):
        L1 = approx_lagrangian(ApproxFamily("a", 1, L))
        # sigma_1(rho) = rho on [0,1]
        assert float(L1.fp(0.25)) == pytest.approx(0.25 * float(L.fp(0.25)), rel=1e-12)

    def test_slope_strictly_increasing(self, L):
        rho = np.linspace(0.0, 3.0, 1501)
        for fam in (ApproxFamily("a", 8, L), ApproxFamily("b", 8, L, s=1.0)):
            Ln = approx_lagrangian(fam)
            assert np.all(np.diff(Ln.fp(rho)) > 0)

    def test_uniform_convergence_both_kinds(self, L):
        rho = np.linspace(0.0, 2.0, 1001)
        fvals = np.asarray(L.f(rho))
        for kind, s in (("a", None), ("b", 1.0)):
            gaps = []
            for n in (2, 4, 8):
                Ln = approx_lagrangian(ApproxFamily(kind, n, L, s=s))
                gaps.append(float(np.max(np.abs(np.asarray(Ln.f(rho)) - fvals))))
            assert gaps[0] > gaps[1] > gaps[2]

    def test_density_matches_quadrature_oracle(self, L):
        # independent oracle: high-resolution trapezoid integration of fp
        Ln = approx_lagrangian(ApproxFamily("b", 4, L, s=1.0))
        rho = np.linspace(0.0, 1.0, 200001)
        cumulative = np.concatenate([[0.0], np.cumsum(
            0.5 * (np.asarray(Ln.fp(rho[1:])) + np.asarray(Ln.fp(rho[:-1]))) * np.diff(rho)
        )])
        for k in (50000, 120000, 200000):
            assert float(Ln.f(rho[k])) == pytest.approx(cumulative[k], abs=5e-10)

    def test_invalid_families_rejected(self, L):
        with pytest.raises(ValueError):
            ApproxFamily("c", 2, L)
        with pytest.raises(ValueError):
            ApproxFamily("b", 2, L, s=-1.0)
        with pytest.raises(ValueError):
            ApproxFamily("a", 0, L)


class TestBetaLimit:
    def test_log_two_at_half(self, L):
        assert float(beta_limit(L, 1.0, 0.5)) == pytest.approx(np.log(2.0), abs=1e-15)

    def test_family_b_oracle_at_half(self, L):
        # the coefficient is the n -> infinity limit of the family-b ratio
        Lb = approx_lagrangian(ApproxFamily("b", 1024, L, s=1.0))
        cb = conjugate(Lb, 25.0)
        val = float(alpha_of(Lb, float(cb.gp(0.5))))
        assert val == pytest.approx(np.log(2.0), abs=1e-2)

    def test_vanishes_at_slope_limit(self, L):
        assert float(beta_limit(L, 1.0, 1.0)) == 0.0
        assert abs(float(beta_limit(L, 3.0, 1.0 - 1e-9))) < 1e-7

    def test_upper_branch_continuity(self, L):
        assert float(beta_limit(L, 1.0, 2.0)) == pytest.approx(0.75, abs=1e-12)
        assert abs(float(beta_limit(L, 1.0, 1.0 + 1e-9))) < 1e-7

    def test_limit_at_zero_is_exponent(self, L):
        # the formula's own limit at r = 0 is s
        for s in (0.5, 1.0, 2.0):
            assert float(beta_limit(L, s, 0.0)) == s
            assert float(beta_limit(L, s, 1e-9)) == pytest.approx(s, abs=1e-6)


class TestGrowthConstants:
    def test_case_study_quadratic(self, L):
        q1, q2, c1, c2 = growth_constants(L, 100.0)
        assert 1.0 < q1 < q2
        assert c1 > 0 and c2 > 0
        assert abs(q1 - 2.0) < 0.5 and abs(q2 - 2.0) < 0.5
        rho = np.linspace(0.0, 100.0, 10001)
        fv = np.asarray(L.f(rho))
        assert np.all(c1 * rho**q1 - c2 <= fv + 1e-12)
        assert np.all(fv <= c1 * rho**q2 + c2 + 1e-12)

    def test_affine_plus_quadratic(self):
        P = Lagrangian(
            f=lambda r: np.asarray(r, float) + np.asarray(r, float) ** 2,
            fp=lambda r: 1.0 + 2.0 * np.asarray(r, float),
            fpp=lambda r: 2.0 * np.ones_like(np.asarray(r, float)),
            fp0=1.0,
        )
        q1, q2, c1, c2 = growth_constants(P, 50.0)
        rho = np.linspace(0.0, 50.0, 10001)
        fv = rho + rho**2
        assert np.all(c1 * rho**q1 - c2 <= fv + 1e-12)
        assert np.all(fv <= c1 * rho**q2 + c2 + 1e-12)

    def test_pure_quadratic_equality_tuple_admissible(self):
        # direct pointwise verification: c1=1, c2=0, q1=q2=2 sandwiches rho^2
        rho = np.linspace(0.0, 50.0, 10001)
        fv = rho**2
        assert np.all(1.0 * rho**2.0 - 0.0 <= fv)
        assert np.all(fv <= 1.0 * rho**2.0 + 0.0)

    def test_rejects_small_interval(self, L):
        with pytest.raises(ValueError):
            growth_constants(L, 5.0)
