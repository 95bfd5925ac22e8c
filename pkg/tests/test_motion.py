import numpy as np
import pytest

from mbhomog.errors import NotInvertibleYet, StepTooLarge, TubeExit
from mbhomog.geometry import disk_cell, tile
from mbhomog.motion import (
    CutoffG,
    audit_assumptions,
    build_level_set,
    check_motion_bounds,
    constant_velocity,
    default_seeds,
    integrate_motion,
    smooth_macro_velocity,
    tube_bump_velocity,
    zero_velocity,
)

BOX = [[0.0, 1.0], [0.0, 1.0]]


@pytest.fixture(scope="module")
def dom():
    return tile(disk_cell(radius=0.25), 0.25, BOX)


@pytest.fixture(scope="module")
def state_const(dom):
    v = constant_velocity(0.3)
    return integrate_motion(dom, v, t_end=0.04, dt=0.004, force=True)


@pytest.fixture(scope="module")
def state_smooth(dom):
    v = smooth_macro_velocity(BOX, amplitude=0.2)
    return integrate_motion(dom, v, t_end=0.04, dt=0.002, force=True)


class TestCutoffG:
    def test_constraints(self, dom):
        a = dom.cell.a
        g = CutoffG(a)
        r = np.linspace(-a, a, 2001)
        assert g(np.array([0.0]))[0] == 0.0
        assert g.deriv(np.array([0.0]))[0] == 1.0
        assert np.all(g.deriv(np.array([a / 2, -a / 2, 0.9 * a])) == 0.0)
        assert np.abs(g.second(r)).max() <= 3.0 / a * (1 + 1e-12)
        # derivative consistency by finite differences
        h = 1e-7
        mid = np.linspace(-0.45 * a, 0.45 * a, 101)
        fd = (g(mid + h) - g(mid - h)) / (2 * h)
        assert np.abs(fd - g.deriv(mid)).max() < 1e-6


class TestAudit:
    def test_zero_velocity(self, dom):
        rep = audit_assumptions(zero_velocity(), dom)
        assert rep["l_v_measured"] == 0.0
        assert rep["support_ok"] and rep["a1_ok"]

    def test_tube_bump_support_and_gradient_scale(self, dom):
        c = 0.1
        v = tube_bump_velocity(dom, amplitude=c)
        rep = audit_assumptions(v, dom)
        assert rep["support_ok"]
        # dominant first-derivative term: sup|grad v| ~ c * ||w'||_inf, with
        # ||w'||_inf = 6/sqrt(5) (1 - 1/5)^2 for the (1-rho^2)^3 bump
        wprime = 6 / np.sqrt(5) * (1 - 0.2) ** 2
        assert rep["sup_grad_v"] == pytest.approx(c * wprime, rel=0.05)
        assert rep["sup_v"] == pytest.approx(c * dom.tube_halfwidth, rel=1e-6)

    def test_support_violation_flagged(self, dom):
        rep = audit_assumptions(constant_velocity(0.5), dom)
        assert not rep["support_ok"]
        assert rep["l_v_measured"] == pytest.approx(0.5, rel=1e-9)


class TestIntegrateMotion:
    def test_zero_velocity_static(self, dom):
        st = integrate_motion(dom, zero_velocity(), t_end=0.1, dt=0.01)
        assert np.abs(st.y - st.seeds[None]).max() == 0.0
        eye = np.eye(2)
        assert np.abs(st.Dy - eye).max() == 0.0
        # z(t) = -n(P x) for all t on tube seeds
        n0 = -st.z[0][st.tube_mask]
        assert np.abs(st.z[:, st.tube_mask, :] + n0[None]).max() == 0.0

    def test_constant_speed_radial(self, dom, state_const):
        # grad v = 0: y(t, gamma) = gamma + eps*c*t*n(gamma)  (Remark-type
        # identity y = gamma + d(y) n(gamma))
        st = state_const
        eps, c, t = dom.epsilon, 0.3, st.t_end
        gam = st.seeds[st.interface_mask]
        n = dom.normal(gam)
        expect = gam + eps * c * t * n
        got = st.y[-1][st.interface_mask]
        assert np.abs(got - expect).max() < 1e-12
        # and d(y(t, gamma)) = eps*c*t
        d = dom.signed_distance(got)
        assert np.abs(d - eps * c * t).max() < 1e-12

    def test_step_halving_error_bound(self, dom):
        # the tube-safety rule caps dt * l_v, so the RK4 dt-vs-dt/2 gap sits
        # at (or below) the dt^4 scale with an O(1) constant
        v = smooth_macro_velocity(BOX, amplitude=0.2)
        dt = 0.003
        y_coarse = integrate_motion(dom, v, t_end=0.048, dt=dt, force=True)
        y_fine = integrate_motion(dom, v, t_end=0.048, dt=dt / 2, force=True)
        y_finer = integrate_motion(dom, v, t_end=0.048, dt=dt / 4, force=True)
        e1 = np.abs(y_coarse.y[-1] - y_fine.y[-1]).max()
        e2 = np.abs(y_fine.y[-1] - y_finer.y[-1]).max()
        assert e1 <= dt**4
        assert e2 <= e1 + 1e-15

    def test_envelope(self, dom, state_smooth):
        rep = check_motion_bounds(state_smooth)
        assert rep["z_envelope_violation"] <= 1e-8

    def test_jacobian_vs_finite_differences(self, dom):
        v = smooth_macro_velocity(BOX, amplitude=0.2)
        smp = dom.surface_samples(16)
        h = 1e-5
        base = smp.points[:8]
        seeds = [base]
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            seeds += [base + e, base - e]
        seeds = np.concatenate(seeds, axis=0)
        st = integrate_motion(dom, v, t_end=0.02, dt=0.002, seeds=seeds,
                              force=True)
        yT = st.y[-1]
        n = len(base)
        fd = np.empty((n, 2, 2))
        fd[:, :, 0] = (yT[n:2 * n] - yT[2 * n:3 * n]) / (2 * h)
        fd[:, :, 1] = (yT[3 * n:4 * n] - yT[4 * n:5 * n]) / (2 * h)
        assert np.abs(fd - st.Dy[-1][:n]).max() < 1e-4

    def test_dz_initialisation_vs_fd(self, dom):
        # Dz(0) = -L (I + d L)^(-1) against finite differences of -n(P x)
        v = zero_velocity()
        smp = dom.surface_samples(8)
        x0 = smp.points + 0.3 * dom.tube_halfwidth * smp.normals
        st = integrate_motion(dom, v, t_end=0.01, dt=0.01, seeds=x0)
        h = 1e-6
        fd = np.empty((len(x0), 2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[:, :, j] = -(dom.normal(x0 + e) - dom.normal(x0 - e)) / (2 * h)
        assert np.abs(fd - st.Dz[0]).max() < 1e-4

    def test_step_too_large(self, dom):
        v = smooth_macro_velocity(BOX, amplitude=0.2)
        with pytest.raises(StepTooLarge):
            integrate_motion(dom, v, t_end=1.0, dt=0.5, force=True)

    def test_tube_exit(self, dom):
        v = constant_velocity(2.0)
        with pytest.raises(TubeExit):
            # displacement eps*c*t crosses eps*a at t = a/c = 0.0625
            integrate_motion(dom, v, t_end=0.12, dt=0.0015, force=True)

    def test_extension_continuity(self, dom):
        # seeds just inside and outside the tube must nearly agree when the
        # velocity dies at the tube boundary
        v = tube_bump_velocity(dom, amplitude=0.1)
        smp = dom.surface_samples(16)
        inner = smp.points + 0.995 * dom.tube_halfwidth * smp.normals
        outer = smp.points + 1.005 * dom.tube_halfwidth * smp.normals
        seeds = np.concatenate([inner, outer], axis=0)
        st = integrate_motion(dom, v, t_end=4e-5, dt=1e-5, seeds=seeds)
        n = len(inner)
        disp_in = np.abs(st.y[-1][:n] - inner).max()
        disp_out = np.abs(st.y[-1][n:] - outer).max()
        assert disp_out == 0.0
        assert disp_in < 1e-12  # w vanishes to second order at the boundary


class TestInversion:
    def test_zero_velocity_identity(self, dom):
        st = integrate_motion(dom, zero_velocity(), t_end=0.02, dt=0.002)
        x = dom.surface_samples(8).points + 0.2 * dom.tube_halfwidth
        x0, _ = st.invert(0.02, x)
        assert np.abs(x0 - x).max() < 1e-12

    def test_round_trip_random(self, dom, state_smooth):
        rng = np.random.default_rng(7)
        smp = dom.surface_samples(64)
        idx = rng.integers(0, len(smp.points), 200)
        off = rng.uniform(-0.7, 0.7, 200)
        pts = smp.points[idx] + (off * dom.tube_halfwidth)[:, None] \
            * smp.normals[idx]
        t = state_smooth.t_end
        yv, _ = state_smooth.flow(t, pts)
        x0, _ = state_smooth.invert(t, yv)
        assert np.abs(x0 - pts).max() < 1e-10

    def test_radial_preimage(self, dom, state_const):
        # constant speed: the moved point at angle theta inverts to the
        # interface point at the same angle
        st = state_const
        gam = st.seeds[st.interface_mask][:10]
        moved = st.y[-1][st.interface_mask][:10]
        x0, _ = st.invert(st.t_end, moved)
        assert np.abs(x0 - gam).max() < 1e-10

    def test_certificate_guard(self, dom):
        v = smooth_macro_velocity(BOX, amplitude=0.2)
        st = integrate_motion(dom, v, t_end=0.01, dt=0.001, force=True)
        st.Dy[-1] += 0.5 * np.eye(2)  # corrupt the certificate
        with pytest.raises(NotInvertibleYet):
            st.invert(0.01, np.array([[0.5, 0.35]]))


class TestBoundsReport:
    def test_zero_velocity_all_zero(self, dom):
        st = integrate_motion(dom, zero_velocity(), t_end=0.02, dt=0.002)
        rep = check_motion_bounds(st)
        assert rep["sup_dy_minus_identity"] == 0.0
        assert rep["sup_dt_dy"] == 0.0
        assert rep["z_envelope_violation"] == 0.0
        assert rep["empirical_t_v"] == st.t_end

    def test_small_velocity_certified_horizon(self, dom, state_smooth):
        rep = check_motion_bounds(state_smooth)
        assert rep["empirical_t_v"] == state_smooth.t_end
        assert rep["det_dy_min"] > 0
        assert rep["z_times_B_frobenius_sup"] <= np.sqrt(2) + 1e-9

    def test_stress_tv_monotone_in_velocity(self, dom):
        # crank the amplitude until the ||Dy - I|| <= 1/4 certificate fails,
        # then check the failure time decreases under velocity doubling
        tvs = []
        for amp, t_end in ((40.0, 0.003), (80.0, 0.0015), (160.0, 0.00075)):
            v = smooth_macro_velocity(BOX, amplitude=amp, wavenumber=2)
            audit = audit_assumptions(v, dom, t_end=t_end)
            dt = t_end / np.ceil(
                t_end * (10.0 * audit["l_v_measured"]) / dom.tube_halfwidth)
            st = integrate_motion(dom, v, t_end=t_end, dt=dt, audit=audit,
                                  force=True)
            tvs.append(check_motion_bounds(st)["empirical_t_v"])
        assert tvs[0] < 0.004
        assert tvs[2] < tvs[1] < tvs[0]


class TestLevelSet:
    def test_initial_slice_is_minus_distance(self, dom, state_smooth):
        level = build_level_set(state_smooth)
        smp = dom.surface_samples(16)
        pts = smp.points + 0.4 * dom.tube_halfwidth * smp.normals
        val = level.phi_tilde(0.0, pts)
        d = dom.signed_distance(pts)
        assert np.abs(val + d).max() < 1e-10

    def test_zero_velocity_time_independent(self, dom):
        st = integrate_motion(dom, zero_velocity(), t_end=0.02, dt=0.002)
        level = build_level_set(st)
        pts = dom.surface_samples(8).points + 0.3 * dom.tube_halfwidth
        assert np.abs(level.phi_tilde(0.02, pts)
                      - level.phi_tilde(0.0, pts)).max() < 1e-12

    def test_transport_identity(self, dom, state_smooth):
        # phi_tilde(t, y(t, Lambda(gamma, l))) = -l
        st = state_smooth
        level = build_level_set(st)
        smp = dom.surface_samples(16)
        l = 0.35 * dom.tube_halfwidth
        x0 = smp.points + l * smp.normals
        yv, _ = st.flow(st.t_end, x0)
        val = level.phi_tilde(st.t_end, yv)
        assert np.abs(val + l).max() < 1e-10

    def test_gradient_is_carried_z(self, dom, state_smooth):
        st = state_smooth
        level = build_level_set(st)
        smp = dom.surface_samples(12)
        pts = smp.points + 0.25 * dom.tube_halfwidth * smp.normals
        t = st.t_end
        yv, _ = st.flow(t, pts)
        val, grad, _ = level.phi_tilde(t, yv, with_grad=True)
        h = 1e-6
        fd = np.empty_like(grad)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[:, j] = (level.phi_tilde(t, yv + e)
                        - level.phi_tilde(t, yv - e)) / (2 * h)
        assert np.abs(fd - grad).max() < 1e-6

    def test_envelope_of_gradient(self, dom, state_smooth):
        st = state_smooth
        level = build_level_set(st)
        pts = dom.surface_samples(16).points
        yv, _ = st.flow(st.t_end, pts)
        _, grad, _ = level.phi_tilde(st.t_end, yv, with_grad=True)
        norms = np.linalg.norm(grad, axis=1)
        lo = np.exp(-dom.epsilon * st.l_v * st.t_end)
        hi = np.exp(dom.epsilon * st.l_v * st.t_end)
        assert np.all(norms >= lo - 1e-8)
        assert np.all(norms <= hi + 1e-8)

    def test_evolution_identity(self, dom, state_smooth):
        # dt phi_tilde = eps |grad phi_tilde| v within 1e-4 (finite
        # differences in t on random tube samples)
        st = state_smooth
        level = build_level_set(st)
        rng = np.random.default_rng(3)
        smp = dom.surface_samples(32)
        idx = rng.integers(0, len(smp.points), 40)
        pts = smp.points[idx] + (rng.uniform(-0.3, 0.3, 40)
                                 * dom.tube_halfwidth)[:, None] * smp.normals[idx]
        t = 0.5 * st.t_end
        dt_fd = 2 * st.dt
        f_plus = level.phi_tilde(t + dt_fd, pts)
        f_minus = level.phi_tilde(t - dt_fd, pts)
        lhs = (f_plus - f_minus) / (2 * dt_fd)
        val, grad, _ = level.phi_tilde(t, pts, with_grad=True)
        rhs = dom.epsilon * np.linalg.norm(grad, axis=1) \
            * st.velocity.value(t, pts)
        assert np.abs(lhs - rhs).max() < 1e-4

    def test_phi_shares_zero_set_and_saturates(self, dom, state_smooth):
        st = state_smooth
        level = build_level_set(st)
        t = st.t_end
        moved = st.y[-1][st.interface_mask][:20]
        assert np.abs(level.phi(t, moved)).max() < 1e-10
        eps, a = dom.epsilon, dom.cell.a
        centre = np.array([[0.375, 0.375]])  # inclusion centre of cell (1,1)
        corner = np.array([[0.5, 0.5]])      # matrix phase, off the tube
        assert level.phi(t, centre)[0] == pytest.approx(eps * a / 4, rel=1e-9)
        assert level.phi(t, corner)[0] == pytest.approx(-eps * a / 4, rel=1e-9)
