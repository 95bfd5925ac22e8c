import numpy as np
import pytest

from mbhomog.errors import GridMismatch
from mbhomog.geometry import disk_cell, tile
from mbhomog.unfolding import (
    check_geometric_identities,
    fold,
    fold_unfold_roundtrip_error,
    lattice_points,
    scaled_trace_norm,
    surface_integral_identity,
    two_scale_distance,
    unfold_identity_discrepancy,
    unfold_surface,
    unfold_volume,
    volume_integral_identity,
)

BOX = [[0.0, 1.0], [0.0, 1.0]]


@pytest.fixture(scope="module")
def cell():
    return disk_cell(radius=0.25)


@pytest.fixture(scope="module")
def dom(cell):
    return tile(cell, 0.25, BOX)


@pytest.fixture(scope="module")
def doms(cell):
    return [tile(cell, e, BOX) for e in (0.25, 0.125, 0.0625)]


class TestUnfoldVolume:
    def test_constant(self, dom):
        uf = unfold_volume(lambda x: np.full(len(x), 3.5), dom, m=8)
        assert np.all(uf.values == 3.5)
        direct, unfolded = volume_integral_identity(
            lambda x: np.full(len(x), 3.5), dom, m=8)
        assert direct == pytest.approx(unfolded, abs=1e-14)
        assert unfolded == pytest.approx(3.5 * dom.tiled_volume(), abs=1e-12)

    def test_periodic_field_unfolds_x_independent(self, dom):
        def f(x):
            from mbhomog.geometry import int_frac
            _, frac = int_frac(x, dom.epsilon)
            return np.sin(2 * np.pi * frac[:, 0]) * np.cos(2 * np.pi * frac[:, 1])

        uf = unfold_volume(f, dom, m=16)
        spread = np.abs(uf.values - uf.values[0][None]).max()
        assert spread < 1e-12

    def test_integral_identity_generic(self, dom):
        def f(x):
            return np.exp(x[:, 0]) * np.sin(3 * x[:, 1])

        direct, unfolded = volume_integral_identity(f, dom, m=16)
        assert direct == pytest.approx(unfolded, abs=1e-13)

    def test_smooth_field_unfold_distance(self, doms):
        # || T_eps f - f ||_{L2} <= Lip(f) sqrt(d) eps for macro-smooth f
        def f(x):
            return x[:, 0] + 2.0 * x[:, 1]

        def ref(x, y):
            return f(x)

        ufs = [unfold_volume(f, d, m=16) for d in doms]
        out = two_scale_distance(ufs, reference=ref)
        lip = np.sqrt(5.0)
        for row, d in zip(out["reference"], doms):
            assert row["distance_to_reference"] <= lip * np.sqrt(2) * d.epsilon


class TestUnfoldSurface:
    def test_constant_identity(self, dom):
        direct, unfolded = surface_integral_identity(
            lambda x: np.ones(len(x)), dom)
        assert direct == pytest.approx(unfolded, abs=1e-12)
        # |Gamma_eps| = ncells * eps^(d-1) * |Gamma|
        per_cell = dom.cell.surface_samples().measure
        assert direct == pytest.approx(
            len(dom.cells) * dom.epsilon * per_cell, rel=1e-10)

    def test_varying_field(self, dom):
        def fb(x):
            return x[:, 0] ** 2 + np.sin(x[:, 1])

        direct, unfolded = surface_integral_identity(fb, dom)
        assert direct == pytest.approx(unfolded, abs=1e-12)

    def test_unfolded_values_match_cell_samples(self, dom):
        def fb(x):
            from mbhomog.geometry import int_frac
            _, frac = int_frac(x, dom.epsilon)
            return frac[:, 0]

        us = unfold_surface(fb, dom)
        base = dom.cell.surface_samples().points[:, 0]
        assert np.abs(us.values - base[None, :]).max() < 1e-12


class TestFold:
    def test_macro_only(self, dom):
        vals = fold(lambda x, y: x[:, 0], dom, m=8)
        pts = lattice_points(dom, 8)
        assert np.abs(vals - pts[:, :, 0]).max() < 1e-14

    def test_micro_only_equals_frac(self, dom):
        vals = fold(lambda x, y: np.sin(2 * np.pi * y[:, 0]), dom, m=8)
        pts = lattice_points(dom, 8)
        from mbhomog.geometry import int_frac
        _, frac = int_frac(pts.reshape(-1, 2), dom.epsilon)
        expect = np.sin(2 * np.pi * frac[:, 0]).reshape(vals.shape)
        assert np.abs(vals - expect).max() < 1e-13

    def test_roundtrip_error_decreases(self, cell):
        def g(x, y):
            return np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]) \
                + 0.3 * np.sin(2 * np.pi * y[:, 0])

        errs = [fold_unfold_roundtrip_error(g, tile(cell, e, BOX), m=8, mx=4)
                for e in (0.25, 0.125, 0.0625)]
        assert errs[2] < errs[1] < errs[0]

    def test_separable_cell_average(self, cell):
        # g(x, y) = x1 * y1: folded cell averages approach x1/2
        dom = tile(cell, 0.0625, BOX)
        vals = fold(lambda x, y: x[:, 0] * y[:, 0], dom, m=16)
        centers = dom.epsilon * (dom.cells.astype(float) + 0.5)
        cell_means = vals.mean(axis=1)
        assert np.abs(cell_means - centers[:, 0] / 2).max() < 0.5 * dom.epsilon


class TestGeometricIdentities:
    def test_disk(self, dom):
        rep = check_geometric_identities(dom, n_samples=300)
        assert rep["all_ok"], rep
        assert rep["max_residual"] <= 1e-10

    def test_ellipse_quarter_eps(self):
        from mbhomog.geometry import ellipse_cell
        dom = tile(ellipse_cell(semi_axes=(0.3, 0.2)), 0.125, BOX)
        rep = check_geometric_identities(dom, n_samples=200)
        assert rep["all_ok"], rep

    def test_curvature_extremum_sample(self):
        from mbhomog.geometry import ellipse_cell
        cell = ellipse_cell(semi_axes=(0.3, 0.2))
        dom = tile(cell, 0.25, BOX)
        gam = np.array([[0.8, 0.5]])  # major apex: curvature extremum
        k = dom.cells[0].astype(float)
        x = dom.epsilon * (k + gam)
        res = np.abs(dom.weingarten(x) - cell.weingarten(gam) / dom.epsilon)
        assert res.max() <= 1e-10

    def test_r_zero_reduces_to_interface_point(self, dom, cell):
        gam = cell.surface_samples(16).points
        k = dom.cells[1].astype(float)
        x = dom.epsilon * (k + gam)
        out = dom.lambda_map(x, np.zeros(len(gam)))
        assert np.abs(out - x).max() < 1e-12


class TestTwoScaleDistance:
    def test_constant_zero_distance(self, doms):
        ufs = [unfold_volume(lambda x: np.full(len(x), 2.0), d, m=8)
               for d in doms]
        out = two_scale_distance(ufs)
        for row in out["pairs"]:
            assert row["distance"] == 0.0

    def test_periodic_field_zero_distance(self, doms):
        def make(dom):
            def f(x):
                from mbhomog.geometry import int_frac
                _, frac = int_frac(x, dom.epsilon)
                return np.cos(2 * np.pi * frac[:, 0])
            return f

        ufs = [unfold_volume(make(d), d, m=8) for d in doms]
        out = two_scale_distance(ufs)
        for row in out["pairs"]:
            assert row["distance"] <= 1e-8

    def test_macro_field_cauchy_decrease(self, doms):
        def f(x):
            return np.sin(np.pi * x[:, 0]) * x[:, 1]

        ufs = [unfold_volume(f, d, m=8) for d in doms]
        out = two_scale_distance(ufs)
        d01 = out["pairs"][0]["distance"]
        d12 = out["pairs"][1]["distance"]
        assert d12 < d01
        assert out["pairs"][1]["monotone"]

    def test_requires_three(self, doms):
        ufs = [unfold_volume(lambda x: x[:, 0], d, m=8) for d in doms[:2]]
        with pytest.raises(GridMismatch):
            two_scale_distance(ufs)


class TestIdentityDiscrepancy:
    def test_2d_bounds(self, doms):
        rep = unfold_identity_discrepancy(doms[1], doms[0])
        assert rep["within_sqrt_d"]
        assert rep["sup_measured"] <= rep["bound_sqrt_d"]

    def test_3d_sqrt_d_vs_sqrt_2(self):
        ball = disk_cell(radius=0.25, dim=3)
        b3 = [[0.0, 2.0]] * 3
        dn = tile(ball, 0.25, b3)
        dm = tile(ball, 0.5, b3)
        rep = unfold_identity_discrepancy(dn, dm, n_samples=2000)
        assert rep["within_sqrt_d"]
        assert rep["bound_sqrt_2"] < rep["bound_sqrt_d"]


class TestScaledTrace:
    def test_constant_one(self, dom):
        rep = scaled_trace_norm(lambda x: np.ones(len(x)),
                                lambda x: np.zeros_like(x), dom)
        assert rep["holds"]
        # lhs ~ |Omega~| * |Gamma| is controlled by 4 C_tr |Omega|
        per_cell = dom.cell.surface_samples().measure
        assert rep["lhs"] == pytest.approx(
            dom.epsilon * len(dom.cells) * dom.epsilon * per_cell, rel=1e-8)

    def test_vanishing_on_tube(self, dom):
        def u(x):
            return np.where(dom.in_tube(x, 1.0), 0.0, 1.0)

        rep = scaled_trace_norm(u, lambda x: np.zeros_like(x), dom)
        assert rep["lhs"] == 0.0

    def test_oscillatory_gradient_term_dominates(self, dom):
        eps = dom.epsilon

        def u(x):
            return np.sin(2 * np.pi * x[:, 0] / eps)

        def gu(x):
            g = np.zeros_like(x)
            g[:, 0] = 2 * np.pi / eps * np.cos(2 * np.pi * x[:, 0] / eps)
            return g

        rep = scaled_trace_norm(u, gu, dom)
        assert rep["holds"]
