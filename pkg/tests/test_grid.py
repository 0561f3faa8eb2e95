import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varstream.grid import (
    BOUNDARY,
    EXTERIOR,
    INTERIOR,
    boundary_data_from_function,
    build_disk,
    build_rect,
    gradient,
    hessian,
    load_field,
    sample_field,
    save_field,
    verify_bsc,
)
from varstream.reference import remark_solution


class TestBuilders:
    def test_disk_contains_origin(self):
        g = build_disk(1.0, 0.2)
        ic = g.nx // 2
        assert g.mask[ic, ic] == INTERIOR

    def test_disk_interior_count_brute_force(self):
        R, h = 0.9, 1 / 64
        g = build_disk(R, h)
        # oracle: independent double loop over lattice points; a node is
        # interior iff its whole 3x3 patch lies inside the disk
        m = (g.nx - 1) // 2

        def inside(i, j):
            return (i * h) ** 2 + (j * h) ** 2 < R * R

        count = 0
        for i in range(-m, m + 1):
            for j in range(-m, m + 1):
                if all(
                    inside(i + di, j + dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)
                ):
                    count += 1
        assert int(g.interior.sum()) == count
        # the in-disk skin carries the trace
        total_inside = sum(
            1 for i in range(-m, m + 1) for j in range(-m, m + 1) if inside(i, j)
        )
        assert int(g.boundary.sum()) == total_inside - count

    def test_disk_coarse_spacing_rejected(self):
        with pytest.raises(ValueError):
            build_disk(1.0, 0.4)

    def test_interior_axis_neighbours_never_exterior(self):
        g = build_disk(0.7, 1 / 16)
        ii = np.argwhere(g.interior)
        for j, i in ii:
            for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                assert g.mask[j + dj, i + di] != EXTERIOR

    def test_boundary_single_closed_contour(self):
        import scipy.ndimage

        g = build_disk(0.7, 1 / 16)
        labels, n = scipy.ndimage.label(g.boundary, structure=np.ones((3, 3)))
        assert n == 1

    def test_mask_idempotent(self):
        a = build_disk(0.8, 1 / 16).mask
        b = build_disk(0.8, 1 / 16).mask
        assert np.array_equal(a, b)

    def test_rect_edges_are_boundary(self):
        g = build_rect(1.0, 0.5, 1 / 16)
        assert np.all(g.mask[0, :] == BOUNDARY)
        assert np.all(g.mask[-1, :] == BOUNDARY)
        assert np.all(g.mask[:, 0] == BOUNDARY)
        assert np.all(g.mask[:, -1] == BOUNDARY)
        assert np.all(g.mask[1:-1, 1:-1] == INTERIOR)

    def test_rect_requires_divisible_sides(self):
        with pytest.raises(ValueError):
            build_rect(1.0, 1.0, 0.3)


class TestBsc:
    def test_affine_trace_is_tight(self):
        g = build_disk(0.9, 1 / 32)
        a, b = 1.5, -0.5
        bd = boundary_data_from_function(g, lambda x, y: a * x + b * y, Q=float(np.hypot(a, b)))
        rep = verify_bsc(g, bd)
        assert rep.ok
        # witnesses collapse onto the affine slope
        for p_plus, p_minus in rep.witnesses.values():
            assert np.allclose(p_plus, (a, b), atol=1e-6)
            assert np.allclose(p_minus, (a, b), atol=1e-6)

    def test_reference_trace_ok_at_q10(self):
        g = build_disk(0.9, 1 / 32)
        ref = remark_solution(0.9)
        bd = boundary_data_from_function(g, ref.eval, Q=10.0)
        assert verify_bsc(g, bd).ok

    def test_oscillating_trace_fails_small_q(self):
        g = build_rect(1.0, 1.0, 1 / 16)
        fn = lambda x, y: np.cos(2 * np.arctan2(y - 0.5, x - 0.5))
        bd = boundary_data_from_function(g, fn, Q=0.1)
        rep = verify_bsc(g, bd)
        assert not rep.ok
        # oracle: exhaustive slope-disk scan at one failing node
        ix, iy = rep.infeasible[0]
        ring = np.argwhere(g.boundary)
        xs, ys = g.xs(), g.ys()
        pts = np.stack([xs[ring[:, 1]], ys[ring[:, 0]]], axis=1)
        vals = bd.values[ring[:, 0], ring[:, 1]]
        k = int(np.where((ring[:, 1] == ix) & (ring[:, 0] == iy))[0][0])
        D = pts - pts[k]
        c = vals - vals[k]
        feasible = False
        for r in np.linspace(0, 0.1, 40):
            for th in np.linspace(0, 2 * np.pi, 180, endpoint=False):
                p = r * np.array([np.cos(th), np.sin(th)])
                if np.all(D @ p >= c - 1e-9) or np.all(D @ p <= c + 1e-9):
                    feasible = True
        assert not feasible

    def test_monotone_in_q(self):
        g = build_disk(0.9, 1 / 16)
        fn = lambda x, y: np.sin(2 * x) * np.cos(y)
        oks = []
        for Q in (0.05, 0.4, 3.0, 10.0):
            bd = boundary_data_from_function(g, fn, Q=Q)
            oks.append(verify_bsc(g, bd).ok)
        # once feasible, stays feasible for larger Q
        first_ok = oks.index(True) if True in oks else len(oks)
        assert all(oks[first_ok:])

    def test_nonfinite_trace_rejected(self):
        g = build_disk(0.9, 1 / 16)
        with pytest.raises(ValueError):
            boundary_data_from_function(g, lambda x, y: np.full_like(x, np.nan), Q=1.0)


class TestOperators:
    def test_gradient_exact_on_affine(self):
        g = build_rect(1.0, 1.0, 1 / 16)
        vf = gradient(sample_field(g, lambda x, y: 2.0 * x - 3.0 * y))
        assert np.nanmax(np.abs(vf.vx - 2.0)) == 0.0
        assert np.nanmax(np.abs(vf.vy + 3.0)) == 0.0

    def test_gradient_exact_on_quadratic(self):
        g = build_rect(1.0, 1.0, 0.1)
        vf = gradient(sample_field(g, lambda x, y: x * x))
        X, _ = g.meshgrid()
        assert np.nanmax(np.abs(vf.vx - 2 * X)) < 1e-13

    def test_gradient_second_order(self):
        errs = []
        for h in (0.1, 0.05, 0.025):
            g = build_rect(1.0, 1.0, h)
            vf = gradient(sample_field(g, lambda x, y: np.sin(x) + 0 * y))
            X, _ = g.meshgrid()
            errs.append(np.nanmax(np.abs(vf.vx - np.cos(X))))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.7)

    def test_hessian_exact_on_quadratics(self):
        g = build_rect(1.0, 1.0, 1 / 16)
        H = hessian(sample_field(g, lambda x, y: x * x - y * y))
        inner = g.interior
        assert np.nanmax(np.abs(H[inner][:, 0, 0] - 2.0)) < 1e-12
        assert np.nanmax(np.abs(H[inner][:, 1, 1] + 2.0)) < 1e-12
        Hxy = hessian(sample_field(g, lambda x, y: x * y))
        assert np.nanmax(np.abs(Hxy[inner][:, 0, 1] - 1.0)) < 1e-12

    def test_hessian_second_order(self):
        errs = []
        for h in (0.1, 0.05, 0.025):
            g = build_rect(1.0, 1.0, h)
            H = hessian(sample_field(g, lambda x, y: np.exp(x + y)))
            X, Y = g.meshgrid()
            E = np.exp(X + Y)
            err = 0.0
            for a, b in ((0, 0), (0, 1), (1, 1)):
                err = max(err, np.nanmax(np.abs(H[..., a, b] - E)))
            errs.append(err)
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.7)

    def test_hessian_undefined_without_patch(self):
        g = build_disk(0.7, 1 / 16)
        H = hessian(sample_field(g, lambda x, y: x * y))
        ring = np.argwhere(g.boundary)
        assert np.all(np.isnan(H[ring[:, 0], ring[:, 1], 0, 0]))


@settings(max_examples=20, deadline=None)
@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    c=st.floats(-3, 3),
)
def test_gradient_affine_property(a, b, c):
    g = build_rect(1.0, 1.0, 1 / 8)
    vf = gradient(sample_field(g, lambda x, y: a * x + b * y + c))
    assert np.nanmax(np.abs(vf.vx - a)) < 1e-12 * (1 + abs(a))
    assert np.nanmax(np.abs(vf.vy - b)) < 1e-12 * (1 + abs(b))


class TestFieldIO:
    def test_roundtrip(self, tmp_path):
        g = build_disk(0.8, 1 / 16)
        f = sample_field(g, lambda x, y: np.sin(3 * x) * y)
        path = tmp_path / "u.csv"
        save_field(path, f)
        f2 = load_field(path)
        assert f2.grid.h == g.h
        assert f2.grid.origin == g.origin
        assert np.array_equal(f2.grid.mask, g.mask)
        same_nan = np.array_equal(np.isnan(f.values), np.isnan(f2.values))
        assert same_nan
        assert np.nanmax(np.abs(f.values - f2.values)) == 0.0

    def test_header_and_precision(self, tmp_path):
        g = build_rect(1.0, 1.0, 0.125)
        f = sample_field(g, lambda x, y: x + y / 3.0)
        path = tmp_path / "u.csv"
        save_field(path, f)
        lines = path.read_text().splitlines()
        assert lines[0] == "x,y,value"
        assert len(lines) == 1 + g.nx * g.ny
        x, y, v = lines[1 + g.nx + 1].split(",")
        assert float(v) == f.values[1, 1]
