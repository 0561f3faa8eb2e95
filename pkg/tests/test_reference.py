import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varstream.critical import detect
from varstream.grid import build_disk, gradient, sample_field
from varstream.pde import case_study_u, residual
from varstream.reference import OutsideDomainError, morse_fields, remark_solution


@pytest.fixture(scope="module")
def ref():
    return remark_solution(0.9)


class TestClosedForm:
    def test_origin(self, ref):
        assert float(ref.eval(0.0, 0.0)) == 0.0

    def test_vanishes_on_axis(self, ref):
        # the nested radical is a perfect square on x = 0
        for y in (-0.8, -0.3, 0.0, 0.45, 0.89):
            assert float(ref.eval(0.0, y)) == pytest.approx(0.0, abs=1e-15)
            gx, gy = ref.grad(0.0, y)
            assert float(gx) == 0.0 and float(gy) == 0.0

    def test_on_x_axis(self, ref):
        for x in (0.2, 0.5, 0.85):
            assert float(ref.eval(x, 0.0)) == pytest.approx(1 - np.sqrt(1 - x * x), abs=1e-14)
            assert float(ref.eval(-x, 0.0)) == pytest.approx(-(1 - np.sqrt(1 - x * x)), abs=1e-14)

    def test_outside_domain_rejected(self, ref):
        with pytest.raises(OutsideDomainError):
            ref.eval(1.0, 0.2)
        with pytest.raises(ValueError):
            remark_solution(1.5)

    def test_gradient_matches_finite_differences_off_axis(self, ref):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.6, 0.6, size=(40, 2))
        pts = pts[np.abs(pts[:, 0]) > 0.05]
        d = 1e-6
        for x, y in pts:
            gx, gy = ref.grad(x, y)
            fx = (float(ref.eval(x + d, y)) - float(ref.eval(x - d, y))) / (2 * d)
            fy = (float(ref.eval(x, y + d)) - float(ref.eval(x, y - d))) / (2 * d)
            assert float(gx) == pytest.approx(fx, abs=5e-10)
            assert float(gy) == pytest.approx(fy, abs=5e-10)

    def test_gradient_first_order_across_axis(self, ref):
        # only Lipschitz regularity across the segment: one-sided differences
        # approach the limit at first order
        y = 0.3
        for d in (1e-3, 1e-4):
            fx = (float(ref.eval(d, y)) - float(ref.eval(-d, y))) / (2 * d)
            assert abs(fx) < 2 * d  # grad limit is 0 on the axis


@settings(max_examples=40, deadline=None)
@given(y=st.floats(-0.85, 0.85), x=st.floats(1e-12, 1e-3))
def test_continuity_across_axis(y, x):
    ref = remark_solution(0.9)
    left = float(ref.eval(-x, y))
    right = float(ref.eval(x, y))
    assert abs(left - right) < 5e-3 * x + 1e-12


class TestAsSolution:
    def test_residual_refines_away_from_axis(self, reference_samples):
        spec = case_study_u()
        sups = []
        for hinv in (32, 64, 128):
            u = reference_samples[hinv]["u"]
            res = residual(spec, u)
            vf = gradient(u)
            rho = np.hypot(vf.vx, vf.vy)
            X, _ = u.grid.meshgrid()
            keep = np.isfinite(res) & (np.abs(X) > 0.2) & (np.hypot(X, _) < 0.7)
            sups.append(float(np.nanmax(np.abs(res[keep]))))
        orders = np.log2(np.array(sups[:-1]) / np.array(sups[1:]))
        assert np.all(orders > 1.0)

    def test_critical_set_converges_to_segment(self, reference_samples):
        dists = []
        for hinv in (32, 64):
            u = reference_samples[hinv]["u"]
            g = u.grid
            rep = detect(u, eps=10.0 * g.h)
            assert rep.components
            big = max(rep.components, key=len)
            xs = g.xs()
            # Hausdorff distance (in grid units) to the segment {x = 0}
            worst = max(abs(xs[ix]) for ix, iy in big) / g.h
            # every interior segment node is captured
            ic = int(round(-g.origin[0] / g.h))
            seg = [(ic, iy) for iy in range(g.ny) if g.interior[iy, ic]]
            assert all(n in big for n in seg)
            dists.append(worst)
        assert all(d <= 25 for d in dists)


class TestMorseFields:
    def test_catalog(self):
        fields = morse_fields()
        assert [idx for _, _, idx in fields] == [1, -1, -2]

    def test_monkey_saddle_winding_oracle(self):
        # analytic winding of the gradient of Re(z^3): direction -2*theta
        _, fn, idx = morse_fields()[2]
        th = np.linspace(0, 2 * np.pi, 400, endpoint=False)
        d = 1e-6
        x, y = 0.3 * np.cos(th), 0.3 * np.sin(th)
        gx = (fn(x + d, y) - fn(x - d, y)) / (2 * d)
        gy = (fn(x, y + d) - fn(x, y - d)) / (2 * d)
        ang = np.unwrap(np.arctan2(gy, gx))
        assert (ang[-1] - ang[0]) / (2 * np.pi) == pytest.approx(idx, abs=0.1)
