"""Interface motion by characteristics with Jacobian propagation.

The moving interface Gamma_eps(t) is tracked through the ODE system

    dy/dt = -eps * (z/|z|) * v(t, y),        y(0, x) = x,
    dz/dt =  eps * |z| * grad v(t, y),       z(0, x) = -n(P(x)),

posed on the tube U around Gamma_eps and extended by y = x outside (the
velocity vanishes there, so trajectories are continuous across the tube
boundary).  z carries the direction of motion: z(t, y^{-1}(t, x)) is the
gradient of the Lipschitz level function phi_tilde whose level sets are the
transported offset surfaces, with the envelope

    exp(-eps l_v t) <= |z(t, x)| <= exp(+eps l_v t).

Jacobians Dy, Dz propagate along the linearized system

    d(Dy)/dt = -eps [ v B(z) Dz + (u x grad v) Dy ],
    d(Dz)/dt = +eps [ |z| D2v Dy + (grad v x u) Dz ],     u = z/|z|,

with Dy(0) = I and Dz(0) = -L (I + d L)^(-1) at the base point.  The
invertibility certificate used downstream is the computable proxy
||Dy - I|| <= 1/4.

A fixed-step classical RK4 integrator is used throughout: trajectories are
C^{1,1} in the data regularity class, so stiffness is not a concern, and the
fixed step keeps runs bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NotInvertibleYet, StepTooLarge, TubeExit
from .geometry import PeriodicDomain

_INVERT_MAX_ITER = 50


# -- cutoff g used to build phi from phi_tilde -----------------------------------


class CutoffG:
    """Odd C^2 cutoff with g(0)=0, g'(0)=1, g'=0 off (-a/2, a/2), |g''| <= 3/a.

    g' descends from 1 to 0 along the cubic smoothstep on [0, a/2], whose
    slope peaks at exactly 3/a; g is its antiderivative (so g saturates at
    +-a/4).  Constraints are re-verified numerically at construction.
    """

    def __init__(self, a):
        self.a = float(a)
        self.b = self.a / 2.0
        r = np.linspace(-self.a, self.a, 4001)
        assert abs(self(np.array([0.0]))[0]) == 0.0
        assert abs(self.deriv(np.array([0.0]))[0] - 1.0) < 1e-14
        assert np.all(self.deriv(np.array([self.b, -self.b, self.a])) == 0.0)
        assert np.abs(self.second(r)).max() <= 3.0 / self.a * (1 + 1e-12)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        q = np.minimum(np.abs(r) / self.b, 1.0)
        val = self.b * (q - q**3 + 0.5 * q**4)
        return np.sign(r) * val

    def deriv(self, r):
        q = np.minimum(np.abs(np.asarray(r, dtype=float)) / self.b, 1.0)
        return 1.0 - 3.0 * q**2 + 2.0 * q**3

    def second(self, r):
        r = np.asarray(r, dtype=float)
        q = np.minimum(np.abs(r) / self.b, 1.0)
        return np.sign(r) * (-6.0 * q + 6.0 * q**2) / self.b


# -- velocity fields --------------------------------------------------------------


class VelocityField:
    """Prescribed normal-velocity data v(t, x) with analytic derivatives.

    value/gradient/hessian are vectorized over point batches (n, d).
    ``l_v_declared`` is the claimed bound on

        max(sup|v|, sup|Dv|, sup|dt v|) + eps sup|D2v| + eps^2 sup|D3v|,

    audited against a sampled supremum by ``audit_assumptions``.
    """

    def __init__(self, value, gradient, hessian, support_tube_only,
                 l_v_declared, params=None):
        self.value = value
        self.gradient = gradient
        self.hessian = hessian
        self.support_tube_only = bool(support_tube_only)
        self.l_v_declared = float(l_v_declared)
        self.params = dict(params or {})


def zero_velocity(dim=2):
    return VelocityField(
        value=lambda t, x: np.zeros(np.atleast_2d(x).shape[0]),
        gradient=lambda t, x: np.zeros_like(np.atleast_2d(x)),
        hessian=lambda t, x: np.zeros(np.atleast_2d(x).shape + (dim,)),
        support_tube_only=True, l_v_declared=0.0, params={"family": "zero"})


def constant_velocity(c, dim=2):
    """Spatially constant normal speed.  Violates the tube-support assumption
    (the audit flags it), but grad v = 0 makes the motion exactly radial:
    y(t, gamma) = gamma + eps*c*t*n(gamma)."""
    return VelocityField(
        value=lambda t, x: np.full(np.atleast_2d(x).shape[0], float(c)),
        gradient=lambda t, x: np.zeros_like(np.atleast_2d(x), dtype=float),
        hessian=lambda t, x: np.zeros(np.atleast_2d(x).shape + (dim,)),
        support_tube_only=False, l_v_declared=abs(float(c)),
        params={"family": "constant", "speed": float(c)})


def smooth_macro_velocity(box, amplitude, wavenumber=1, time_profile="const",
                          decay_rate=0.0):
    """Macro-scale smooth velocity A * (1/2 + 1/2 prod_j cos(k pi x_j / L_j)).

    Spatial variation lives on the box scale, so the audited l_v is
    first-derivative dominated and eps-uniform; the unfolded sequence
    converges (strongly, trivially) to the same y-independent function.
    Not tube-supported: runs require the audit override.
    """
    box = np.asarray(box, dtype=float)
    A = float(amplitude)
    kvec = np.pi * wavenumber / (box[:, 1] - box[:, 0])
    d = box.shape[0]

    def tprof(t):
        return 1.0 if time_profile == "const" else float(np.exp(-decay_rate * t))

    def value(t, x):
        x = np.atleast_2d(x)
        c = np.cos(kvec * (x - box[:, 0]))
        return A * tprof(t) * (0.5 + 0.5 * np.prod(c, axis=1))

    def gradient(t, x):
        x = np.atleast_2d(x)
        c = np.cos(kvec * (x - box[:, 0]))
        s = np.sin(kvec * (x - box[:, 0]))
        out = np.empty_like(x)
        for j in range(d):
            others = np.prod(np.delete(c, j, axis=1), axis=1)
            out[:, j] = -0.5 * kvec[j] * s[:, j] * others
        return A * tprof(t) * out

    def hessian(t, x):
        x = np.atleast_2d(x)
        c = np.cos(kvec * (x - box[:, 0]))
        s = np.sin(kvec * (x - box[:, 0]))
        out = np.empty(x.shape + (d,))
        for i in range(d):
            for j in range(d):
                if i == j:
                    others = np.prod(np.delete(c, i, axis=1), axis=1)
                    out[:, i, i] = -0.5 * kvec[i] ** 2 * c[:, i] * others
                else:
                    rest = np.prod(np.delete(c, (i, j), axis=1), axis=1) \
                        if d > 2 else np.ones(x.shape[0])
                    out[:, i, j] = (0.5 * kvec[i] * kvec[j]
                                    * s[:, i] * s[:, j] * rest)
        return A * tprof(t) * out

    lv = A * max(1.0, float(np.max(kvec)))
    return VelocityField(
        value=value, gradient=gradient, hessian=hessian,
        support_tube_only=False, l_v_declared=lv,
        params={"family": "smooth_macro", "amplitude": A,
                "wavenumber": wavenumber, "time_profile": time_profile})


def _bump(rho):
    """C^2 bump w(rho) = (1 - rho^2)^3 on |rho| < 1, with derivatives."""
    rho = np.asarray(rho, dtype=float)
    inside = np.abs(rho) < 1.0
    q = np.where(inside, 1.0 - rho**2, 0.0)
    w = q**3
    wp = np.where(inside, -6.0 * rho * q**2, 0.0)
    wpp = np.where(inside, -6.0 * q**2 + 24.0 * rho**2 * q, 0.0)
    return w, wp, wpp


def tube_bump_velocity(dom: PeriodicDomain, amplitude, modulation="none",
                       mod_wavenumber=1, time_profile="const", decay_rate=0.0,
                       l_v_cap=None):
    """(A3)-compliant family v(t,x) = A m(x) T(t) w(d(x)/(eps a)).

    The profile w is supported in the tube, so supp v is contained in U; the
    fast variable enters only through d(x)/(eps a) = d_cell(xi)/a, which makes
    the unfolded sequence converge strongly to A m(x) T(t) w(d_Y(y)/a).
    Amplitudes are quoted as a fraction of eps*a so the audited l_v stays
    O(amplitude/a) across the sweep; pass ``l_v_cap`` to raise if a declared
    cap would be exceeded.
    """
    eps_a = dom.tube_halfwidth
    A = float(amplitude) * eps_a
    box = dom.box
    kvec = np.pi * mod_wavenumber / (box[:, 1] - box[:, 0])

    def mod(x):
        x = np.atleast_2d(x)
        if modulation == "none":
            n = x.shape[0]
            return np.ones(n), np.zeros_like(x), np.zeros(x.shape + (x.shape[1],))
        if modulation != "cosine":
            raise ValueError(f"unknown modulation {modulation!r}")
        # product of cosines, Neumann-compatible on the box
        c = np.cos(kvec * (x - box[:, 0]))
        s = np.sin(kvec * (x - box[:, 0]))
        m = 0.5 + 0.5 * np.prod(c, axis=1)
        grad = np.empty_like(x)
        d = x.shape[1]
        for j in range(d):
            others = np.prod(np.delete(c, j, axis=1), axis=1)
            grad[:, j] = -0.5 * kvec[j] * s[:, j] * others
        hess = np.empty(x.shape + (d,))
        for i in range(d):
            for j in range(d):
                if i == j:
                    others = np.prod(np.delete(c, i, axis=1), axis=1)
                    hess[:, i, i] = -0.5 * kvec[i]**2 * c[:, i] * others
                else:
                    rest = np.prod(np.delete(c, (i, j), axis=1), axis=1) \
                        if d > 2 else 1.0
                    hess[:, i, j] = 0.5 * kvec[i] * kvec[j] * s[:, i] * s[:, j] * rest
        return m, grad, hess

    def tprof(t):
        if time_profile == "const":
            return 1.0
        if time_profile == "decay":
            return float(np.exp(-decay_rate * t))
        raise ValueError(f"unknown time profile {time_profile!r}")

    def _collar(x):
        _, d, n, ok = dom.try_collar_inverse(x)
        ok = ok & dom.covered(x)  # no interface in the boundary layer
        rho = np.where(ok, d / eps_a, 2.0)
        return rho, n, ok

    def value(t, x):
        x = np.atleast_2d(x)
        rho, _, _ = _collar(x)
        w, _, _ = _bump(rho)
        m, _, _ = mod(x)
        return A * tprof(t) * m * w

    def gradient(t, x):
        x = np.atleast_2d(x)
        rho, n, ok = _collar(x)
        w, wp, _ = _bump(rho)
        m, gm, _ = mod(x)
        out = gm * w[:, None] + (m * wp / eps_a)[:, None] * n
        return A * tprof(t) * out

    def hessian(t, x):
        x = np.atleast_2d(x)
        dp, dnp, _, d = dom.projection_jacobian(
            x, max_dist_cell=0.95 * dom.cell.reach)
        rho = d / eps_a
        _, xi = dom.cell_coords(x)
        n = dom.cell.normal(dom.cell.project(xi, max_dist=0.95 * dom.cell.reach))
        w, wp, wpp = _bump(rho)
        m, gm, hm = mod(x)
        nn = n[:, :, None] * n[:, None, :]
        ngm = n[:, :, None] * gm[:, None, :]
        out = (hm * w[:, None, None]
               + (wp / eps_a)[:, None, None] * (ngm + ngm.transpose(0, 2, 1))
               + (m * wpp / eps_a**2)[:, None, None] * nn
               + (m * wp / eps_a)[:, None, None] * dnp)
        return A * tprof(t) * out

    def hessian_safe(t, x):
        x = np.atleast_2d(x)
        rho, _, ok = _collar(x)
        out = np.zeros(x.shape + (x.shape[1],))
        inner = ok & (np.abs(rho) < 1.0)
        if inner.any():
            out[inner] = hessian(t, x[inner])
        return out

    # bump-profile derivative scales: each radial derivative costs 1/(eps a),
    # and the (A1) weights leave 1, 1/a, 1/a^2 factors on |Dv|, eps|D2v|,
    # eps^2|D3v| after the A = amplitude * eps * a normalisation
    a = dom.cell.a
    lv_quote = float(amplitude) * (2.0 + 6.0 / a + 50.0 / a**2)
    if l_v_cap is not None and lv_quote > l_v_cap:
        raise ValueError(
            f"velocity family quote l_v ~ {lv_quote:.3g} exceeds cap {l_v_cap}")
    return VelocityField(
        value=value, gradient=gradient, hessian=hessian_safe,
        support_tube_only=True, l_v_declared=lv_quote,
        params={"family": "tube_bump", "amplitude": float(amplitude),
                "modulation": modulation, "time_profile": time_profile})


def audit_assumptions(v: VelocityField, dom: PeriodicDomain, t_end=1.0,
                      n_grid=48, n_time=5):
    """Sampled audit of the motion-problem data assumptions.

    Measures l_v = max(sup|v|, sup|Dv|, sup|dt v|) + eps sup|D2v|
    + eps^2 sup|D3v| over a dense space-time grid (third derivative by finite
    differences of the Hessian) and checks the tube-support requirement.
    Report-only: never raises.
    """
    box = dom.box
    axes = [np.linspace(lo, hi, n_grid, endpoint=False) + (hi - lo) / (2 * n_grid)
            for lo, hi in box]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dom.dim)
    tube = dom.in_tube(grid, fraction=1.0)
    # refine near the interface: collar points at several offsets
    smp = dom.surface_samples(64 if dom.dim == 2 else 12)
    offs = np.linspace(-0.95, 0.95, 9) * dom.tube_halfwidth
    collar = (smp.points[:, None, :]
              + offs[None, :, None] * smp.normals[:, None, :]).reshape(-1, dom.dim)
    pts = np.concatenate([grid, collar], axis=0)
    times = np.linspace(0.0, t_end, n_time)
    sup_v = sup_dv = sup_d2 = sup_d3 = sup_dt = 0.0
    h3 = 1e-4 * dom.epsilon
    eye = np.eye(dom.dim)
    for t in times:
        val = np.abs(v.value(t, pts))
        sup_v = max(sup_v, float(val.max()))
        g = v.gradient(t, pts)
        sup_dv = max(sup_dv, float(np.linalg.norm(g, axis=1).max()))
        H = v.hessian(t, pts)
        sup_d2 = max(sup_d2, float(np.linalg.norm(H, axis=(1, 2)).max()))
        dt_fd = (np.abs(v.value(t + 1e-6, pts) - val) / 1e-6
                 if t == 0 else np.abs(v.value(t, pts) - v.value(t - 1e-6, pts)) / 1e-6)
        sup_dt = max(sup_dt, float(np.abs(dt_fd).max()))
        for j in range(dom.dim):
            d3 = (v.hessian(t, pts + h3 * eye[j]) -
                  v.hessian(t, pts - h3 * eye[j])) / (2 * h3)
            sup_d3 = max(sup_d3, float(np.abs(d3).max()))
    out_of_tube = ~dom.in_tube(pts, fraction=1.0)
    sup_outside = 0.0
    for t in times:
        sup_outside = max(sup_outside,
                          float(np.abs(v.value(t, pts[out_of_tube])).max()))
    support_ok = sup_outside == 0.0
    l_v = (max(sup_v, sup_dv, sup_dt) + dom.epsilon * sup_d2
           + dom.epsilon**2 * sup_d3)
    return {
        "l_v_measured": l_v,
        "sup_v": sup_v, "sup_grad_v": sup_dv, "sup_dt_v": sup_dt,
        "eps_sup_hess_v": dom.epsilon * sup_d2,
        "eps2_sup_d3_v": dom.epsilon**2 * sup_d3,
        "sup_v_outside_tube": sup_outside,
        "support_ok": bool(support_ok),
        "a1_ok": bool(support_ok and np.isfinite(l_v)
                      and l_v <= max(v.l_v_declared, 1e-12) * 1.10 + 1e-12),
    }


# -- motion state -----------------------------------------------------------------


@dataclass
class MotionState:
    """Trajectories of the characteristic system on a seed lattice.

    Arrays are indexed (time, seed, ...):  y, z are (nt, ns, d); Dy, Dz are
    (nt, ns, d, d).  ``interface_mask`` marks the rows seeded on Gamma_eps,
    ``tube_mask`` the rows whose z-initialisation is valid (collar points).
    Rows outside the tube carry y = x and a dummy unit z.
    """

    dom: PeriodicDomain
    velocity: VelocityField
    times: np.ndarray
    seeds: np.ndarray
    y: np.ndarray
    z: np.ndarray
    Dy: np.ndarray
    Dz: np.ndarray
    interface_mask: np.ndarray
    tube_mask: np.ndarray
    active_mask: np.ndarray
    l_v: float
    dt: float
    audit: dict = field(default_factory=dict)

    @property
    def epsilon(self):
        return self.dom.epsilon

    @property
    def t_end(self):
        return float(self.times[-1])

    def stored_index(self, t):
        """Index of the latest stored time <= t (t may fall between stores)."""
        if t > self.t_end + 1e-12:
            raise ValueError(f"t={t} beyond integrated horizon {self.t_end}")
        return max(int(np.searchsorted(self.times, t + 1e-12)) - 1, 0)

    # fresh batched integration for arbitrary points (used by inversion and
    # the level-set evaluator)
    def flow(self, t, X, with_jacobian=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        state = _initial_state(self.dom, X, with_jacobian)
        return _integrate(self.dom, self.velocity, state, 0.0, t, self.dt,
                          with_jacobian)

    def empirical_t_v(self):
        """First stored time at which sup ||Dy - I|| exceeds 1/4 (else t_end)."""
        eye = np.eye(self.dom.dim)
        dev = np.linalg.norm(self.Dy - eye, ord=2, axis=(2, 3)).max(axis=1)
        bad = np.nonzero(dev > 0.25)[0]
        return float(self.times[bad[0]]) if bad.size else self.t_end

    def invert(self, t, x, guess=None):
        """Solve y(t, x0) = x by Newton using the integrated Jacobian.

        Returns (x0, z(t, x0)): the carried z is grad phi_tilde at x.
        Requires the ||Dy - I|| <= 1/4 certificate at time t.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ti = self.stored_index(t)
        eye = np.eye(self.dom.dim)
        dev = np.linalg.norm(self.Dy[:ti + 1] - eye, ord=2, axis=(2, 3)).max()
        if dev > 0.25:
            raise NotInvertibleYet(
                f"||Dy - I|| = {dev:.3f} > 1/4 by t = {t}")
        x0 = np.array(x if guess is None else np.atleast_2d(guess), dtype=float)
        z_out = None
        for _ in range(_INVERT_MAX_ITER):
            yv, zv, Dyv, _ = self.flow(t, x0, with_jacobian=True)
            res = yv - x
            z_out = zv
            if np.abs(res).max() < 1e-12:
                break
            x0 = x0 - np.linalg.solve(Dyv, res[..., None])[..., 0]
        else:
            raise NoConvergence("motion inversion Newton stalled")
        return x0, z_out


def _initial_state(dom, X, with_jacobian):
    n, d = X.shape
    gam, dist, normals, ok = dom.try_collar_inverse(X)
    z0 = np.where(ok[:, None], -normals, np.tile(-np.eye(d)[0], (n, 1)))
    # seeds outside the strict tube are frozen at y = x for all times (the
    # definitional extension of the characteristic system off the tube)
    active = ok & (np.abs(dist) < dom.tube_halfwidth) & dom.covered(X)
    state = {"y": X.copy(), "z": z0, "tube_ok": ok, "active": active}
    if with_jacobian:
        Dy0 = np.tile(np.eye(d), (n, 1, 1))
        Dz0 = np.zeros((n, d, d))
        if ok.any():
            _, xi = dom.cell_coords(X[ok])
            Lc = dom.cell.weingarten(dom.cell.project(
                xi, max_dist=0.95 * dom.cell.reach)) / dom.epsilon
            dloc = dist[ok]
            inv = np.linalg.inv(np.eye(d)[None] + dloc[:, None, None] * Lc)
            Dz0[ok] = -Lc @ inv
        state["Dy"], state["Dz"] = Dy0, Dz0
    return state


def _rhs(dom, v, t, state, with_jacobian):
    eps = dom.epsilon
    y, z = state["y"], state["z"]
    act = state["active"].astype(float)
    znorm = np.linalg.norm(z, axis=1, keepdims=True)
    u = z / znorm
    val = v.value(t, y) * act
    grad = v.gradient(t, y) * act[:, None]
    dy = -eps * u * val[:, None]
    dz = eps * znorm * grad
    out = {"y": dy, "z": dz}
    if with_jacobian:
        d = y.shape[1]
        B = (np.eye(d)[None] - u[:, :, None] * u[:, None, :]) / znorm[:, :, None]
        hess = v.hessian(t, y) * act[:, None, None]
        Dy, Dz = state["Dy"], state["Dz"]
        u_g = u[:, :, None] * grad[:, None, :]
        out["Dy"] = -eps * (val[:, None, None] * (B @ Dz) + u_g @ Dy)
        out["Dz"] = eps * (znorm[:, :, None] * (hess @ Dy)
                           + u_g.transpose(0, 2, 1) @ Dz)
    return out


def _axpy(state, rhs, h, with_jacobian):
    keys = ["y", "z"] + (["Dy", "Dz"] if with_jacobian else [])
    return {**{k: state[k] + h * rhs[k] for k in keys},
            "tube_ok": state["tube_ok"], "active": state["active"]}


def _rk4_step(dom, v, t, state, h, with_jacobian):
    k1 = _rhs(dom, v, t, state, with_jacobian)
    k2 = _rhs(dom, v, t + h / 2, _axpy(state, k1, h / 2, with_jacobian),
              with_jacobian)
    k3 = _rhs(dom, v, t + h / 2, _axpy(state, k2, h / 2, with_jacobian),
              with_jacobian)
    k4 = _rhs(dom, v, t + h, _axpy(state, k3, h, with_jacobian), with_jacobian)
    keys = ["y", "z"] + (["Dy", "Dz"] if with_jacobian else [])
    new = {k: state[k] + (h / 6.0) * (k1[k] + 2 * k2[k] + 2 * k3[k] + k4[k])
           for k in keys}
    new["tube_ok"] = state["tube_ok"]
    new["active"] = state["active"]
    return new


def _integrate(dom, v, state, t0, t1, dt, with_jacobian):
    t = t0
    n_full = int(np.floor((t1 - t0) / dt + 1e-9))
    for _ in range(n_full):
        state = _rk4_step(dom, v, t, state, dt, with_jacobian)
        t += dt
    rem = t1 - t
    if rem > 1e-12:
        state = _rk4_step(dom, v, t, state, rem, with_jacobian)
    if with_jacobian:
        return state["y"], state["z"], state["Dy"], state["Dz"]
    return state["y"], state["z"]


def default_seeds(dom: PeriodicDomain, n_surface=None, tube_layers=4,
                  include_outside=False):
    """Interface samples plus collar-offset layers (and optionally a few
    points just outside the tube, for extension-continuity checks)."""
    smp = dom.surface_samples(n_surface)
    offs = np.linspace(-0.8, 0.8, tube_layers)
    pts = [smp.points]
    masks = [np.ones(len(smp), dtype=bool)]
    for o in offs:
        if abs(o) < 1e-12:
            continue
        pts.append(smp.points + o * dom.tube_halfwidth * smp.normals)
        masks.append(np.zeros(len(smp), dtype=bool))
    if include_outside:
        pts.append(smp.points + 1.05 * dom.tube_halfwidth * smp.normals)
        masks.append(np.zeros(len(smp), dtype=bool))
    return np.concatenate(pts, axis=0), np.concatenate(masks)


def integrate_motion(dom: PeriodicDomain, v: VelocityField, t_end, dt,
                     seeds=None, interface_mask=None, store_every=1,
                     audit=None, force=False, t_audit=None) -> MotionState:
    """Integrate the characteristic system on a seed lattice.

    Preconditions: the (A1) audit passed (or ``force``), and
    dt <= eps*a / (10 l_v) so no interface sample can cross the tube within
    one step.  Interface samples leaving the tube raise TubeExit.
    """
    if audit is None:
        audit = audit_assumptions(v, dom, t_end=t_audit or t_end)
    if not audit["a1_ok"] and not force:
        raise ValueError(
            f"velocity audit failed (l_v={audit['l_v_measured']:.4g}, "
            f"support_ok={audit['support_ok']}); pass force=True to override")
    l_v = audit["l_v_measured"]
    dt_max = dom.tube_halfwidth / (10.0 * l_v + 1e-12)
    if dt > dt_max:
        raise StepTooLarge(
            f"dt={dt} exceeds tube-safety bound {dt_max:.4g}")
    if seeds is None:
        seeds, interface_mask = default_seeds(dom)
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if interface_mask is None:
        interface_mask = np.zeros(len(seeds), dtype=bool)

    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(t_end, 1.0):
        raise ValueError("t_end must be an integer multiple of dt")
    state = _initial_state(dom, seeds, with_jacobian=True)
    store_idx = list(range(0, n_steps + 1, store_every))
    if store_idx[-1] != n_steps:
        store_idx.append(n_steps)
    times, ys, zs, Dys, Dzs = [], [], [], [], []

    def _store(step):
        times.append(step * dt)
        ys.append(state["y"].copy())
        zs.append(state["z"].copy())
        Dys.append(state["Dy"].copy())
        Dzs.append(state["Dz"].copy())

    _store(0)
    eps_a = dom.tube_halfwidth
    for step in range(1, n_steps + 1):
        state = _rk4_step(dom, v, (step - 1) * dt, state, dt, True)
        if interface_mask.any():
            yi = state["y"][interface_mask]
            _, d, _, ok = dom.try_collar_inverse(yi)
            if np.any(~ok) or np.any(np.abs(d) >= eps_a):
                raise TubeExit(
                    f"interface sample left the tube at t={step * dt:.4g} "
                    f"(max |d| = {np.abs(d).max():.4g}, eps*a = {eps_a:.4g})")
        if step in store_idx:
            _store(step)

    return MotionState(
        dom=dom, velocity=v, times=np.array(times), seeds=seeds,
        y=np.array(ys), z=np.array(zs), Dy=np.array(Dys), Dz=np.array(Dzs),
        interface_mask=np.asarray(interface_mask, dtype=bool),
        tube_mask=state["tube_ok"], active_mask=state["active"],
        l_v=l_v, dt=float(dt), audit=audit)


def check_motion_bounds(state: MotionState):
    """Sampled suprema backing the a-priori estimates of the motion system.

    Reports sup||Dy - I||, sup||dt Dy||, eps sup||Dz||, the worst violation
    of the |z| envelope, the Frobenius bound |z| ||B(z)||_F <= sqrt(2), and
    the empirical certificate time t_v.
    """
    dom, eps, l_v = state.dom, state.epsilon, state.l_v
    eye = np.eye(dom.dim)
    tube = state.tube_mask
    dev = np.linalg.norm(state.Dy - eye, ord=2, axis=(2, 3))
    sup_dy_dev = float(dev[:, tube].max()) if tube.any() else 0.0
    eps_dz = eps * np.linalg.norm(state.Dz, ord=2, axis=(2, 3))
    sup_eps_dz = float(eps_dz[:, tube].max()) if tube.any() else 0.0
    # dt Dy recomputed exactly from the RHS at stored states
    sup_dtdy = 0.0
    for i, t in enumerate(state.times):
        st = {"y": state.y[i], "z": state.z[i], "Dy": state.Dy[i],
              "Dz": state.Dz[i], "tube_ok": tube, "active": state.active_mask}
        r = _rhs(dom, state.velocity, t, st, True)
        val = np.linalg.norm(r["Dy"][tube], ord=2, axis=(1, 2))
        if val.size:
            sup_dtdy = max(sup_dtdy, float(val.max()))
    znorm = np.linalg.norm(state.z[:, tube, :], axis=2)
    env_lo = np.exp(-eps * l_v * state.times)[:, None]
    env_hi = np.exp(eps * l_v * state.times)[:, None]
    env_violation = float(np.maximum(env_lo - znorm, znorm - env_hi).max()) \
        if tube.any() else 0.0
    B_bound = 0.0
    for i in range(len(state.times)):
        z = state.z[i][tube]
        zn = np.linalg.norm(z, axis=1)
        u = z / zn[:, None]
        B = (np.eye(dom.dim)[None] - u[:, :, None] * u[:, None, :]) / zn[:, None, None]
        B_bound = max(B_bound, float((zn * np.linalg.norm(B, axis=(1, 2))).max()))
    det_min = float(np.linalg.det(state.Dy[:, tube, :, :]).min()) if tube.any() else 1.0
    return {
        "sup_dy_minus_identity": sup_dy_dev,
        "sup_dt_dy": sup_dtdy,
        "eps_sup_dz": sup_eps_dz,
        "z_envelope_violation": max(env_violation, 0.0),
        "z_times_B_frobenius_sup": B_bound,
        "det_dy_min": det_min,
        "empirical_t_v": state.empirical_t_v(),
        "t_end": state.t_end,
    }


# -- level-set reconstruction ------------------------------------------------------


class LevelSetField:
    """Level functions of the transported geometry.

    phi_tilde(t, x) = -d(y^{-1}(t, x)) on the moved tube, clamped to
    -+eps*a by phase outside it; its gradient is z(t, y^{-1}(t, x)), carried
    exactly by the inversion flow.  phi = eps g(phi_tilde / eps) shares the
    zero set and saturates off the half-tube.
    """

    def __init__(self, state: MotionState):
        self.state = state
        self.dom = state.dom
        self.g = CutoffG(self.dom.cell.a)

    def phi_tilde(self, t, x, with_grad=False, guess=None):
        dom = self.dom
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eps_a = dom.tube_halfwidth
        x0, z = self.state.invert(t, x, guess=guess)
        _, d, _, ok = dom.try_collar_inverse(x0)
        # off the moved tube the fallback |d| exceeds eps*a with the phase
        # sign, so one clip realises the -+eps*a saturation of phi_tilde
        val = -np.clip(d, -eps_a, eps_a)
        if not with_grad:
            return val
        return val, z, x0

    def phi(self, t, x, guess=None):
        eps = self.dom.epsilon
        return eps * self.g(self.phi_tilde(t, x, guess=guess) / eps)

    def phi_and_slope_data(self, t, x, guess=None):
        """(phi, phi_tilde, grad phi_tilde, x0) in one inversion pass."""
        eps = self.dom.epsilon
        pt, z, x0 = self.phi_tilde(t, x, with_grad=True, guess=guess)
        return eps * self.g(pt / eps), pt, z, x0


def build_level_set(state: MotionState) -> LevelSetField:
    return LevelSetField(state)
