"""Periodic two-phase cell geometry and its tubular-neighborhood operators.

The unit cell Y = (0,1)^d carries a compact inclusion Y2 = {phi < 0} whose
boundary Gamma = {phi = 0} is a smooth implicit surface with analytic
gradient and Hessian.  Everything downstream (interface motion, height
functions, coordinate transforms, unfolding identities) works inside the
collar

    Lambda(gamma, s) = gamma + s * n(gamma),   |s| < a,

so a cell carries its tube half-width ``a`` and a sampled lower bound on the
reach of Gamma.  Scaled copies of the cell tile an axis-aligned box; all
point operations on the epsilon-scaled interface reduce to cell coordinates
through x = eps * (k + xi).

Conventions:
  * phi < 0 inside the inclusion, phi > 0 in the connected matrix phase;
  * normals point out of the inclusion, n = grad(phi)/|grad(phi)|;
  * ``weingarten`` returns the curvature matrix whose nonzero eigenvalues
    are the principal curvatures of Gamma, positive for a convex inclusion
    (1/R for a disk of radius R), and which annihilates the normal.
    With that sign the identities used throughout are

        DP(x)        = (I + d(x) L)^(-1) (I - n (x) n),
        D(n o P)(x)  = L (I + d(x) L)^(-1),

    where L, n are taken at P(x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateGradient, EmptyTiling, NoConvergence, OutsideTube

_PROJECT_MAX_ITER = 50
_PHI_TOL = 1e-13
_TANGENT_TOL = 1e-12


@dataclass(frozen=True)
class SurfaceSamples:
    """Quadrature sample batch on an interface.

    points : (n, d) coordinates on the surface
    normals: (n, d) unit normals, outward from the inclusion phase
    weights: (n,) quadrature weights; their sum approximates the surface measure
    """

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.points.shape[0]

    @property
    def measure(self):
        return float(self.weights.sum())


class ImplicitSurfaceCell:
    """Two-phase unit cell given by a smooth implicit function.

    Parameters
    ----------
    dim : 2 or 3
    phi, grad, hess : vectorized callables on points of shape (..., d)
        returning (...,), (..., d) and (..., d, d) respectively.
    center : point the inclusion is star-shaped around (all built-ins are).
    radial_bracket : (r_lo, r_hi) bracket for the radial root solve used by
        the surface sampler.
    tube_width : optional override for the tube half-width ``a``; defaults
        to reach/2 and is validated against 2a <= reach.
    params : JSON-able description used for hashing and serialization.
    """

    def __init__(self, dim, phi, grad, hess, center, radial_bracket,
                 tube_width=None, params=None, exact_volume=None):
        if dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {dim}")
        self.dim = dim
        self._phi = phi
        self._grad = grad
        self._hess = hess
        self.center = np.asarray(center, dtype=float)
        self.radial_bracket = (float(radial_bracket[0]), float(radial_bracket[1]))
        self.params = dict(params or {})
        self._exact_volume = exact_volume
        self._sample_cache = {}

        base = self._build_samples(256 if dim == 2 else 24)
        kappa = self.curvatures(base.points)
        kappa_max = float(np.abs(kappa).max())
        clearance = float(min(base.points.min(), (1.0 - base.points).min()))
        self.reach = min(1.0 / kappa_max if kappa_max > 0 else np.inf, clearance)
        if not np.isfinite(self.reach) or self.reach <= 0:
            raise ValueError("could not establish a positive reach for the interface")
        if tube_width is None:
            tube_width = 0.5 * self.reach
        if 2.0 * tube_width > self.reach * (1.0 + 1e-12):
            raise ValueError(
                f"tube half-width a={tube_width} violates 2a <= reach={self.reach}")
        self.a = float(tube_width)
        # sampled sup of |grad phi| near the interface; used for cheap
        # distance bounds before any projection is attempted
        offs = np.linspace(-0.9, 0.9, 7) * self.a
        probe = base.points[:, None, :] + offs[None, :, None] * base.normals[:, None, :]
        gnorm = np.linalg.norm(self.grad(probe.reshape(-1, dim)), axis=-1)
        self.grad_max = float(gnorm.max())
        self.grad_min = float(gnorm.min())

    # -- raw implicit function ------------------------------------------------

    def phi(self, y):
        return self._phi(np.asarray(y, dtype=float))

    def grad(self, y):
        return self._grad(np.asarray(y, dtype=float))

    def hess(self, y):
        return self._hess(np.asarray(y, dtype=float))

    def normal(self, y):
        g = self.grad(y)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(norm < 1e-10):
            raise DegenerateGradient("grad phi vanishes where a normal is required")
        return g / norm

    # -- projection and signed distance ---------------------------------------

    def try_project(self, y, max_dist):
        """Soft batched closest-point solve; never raises.

        Lagrange-Newton on (gamma - y + lam * grad phi(gamma), phi(gamma)) = 0.
        Returns (gamma, converged, within) where ``converged`` marks Newton
        success and ``within`` marks |y - gamma| <= max_dist.  Points whose
        cheap bound |phi| > max_dist * sup|grad phi| are skipped outright.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        n_pts, d = y.shape
        phi0 = self.phi(y)
        active = np.abs(phi0) <= max_dist * self.grad_max * (1.0 + 1e-9) + 1e-13
        gam = y.copy()
        converged = np.zeros(n_pts, dtype=bool)
        if active.any():
            ya = y[active]
            g0 = self.grad(ya)
            lam = self.phi(ya) / np.einsum("ij,ij->i", g0, g0)
            ga = ya - lam[:, None] * g0
            ok = np.zeros(ya.shape[0], dtype=bool)
            for _ in range(_PROJECT_MAX_ITER):
                g = self.grad(ga)
                H = self.hess(ga)
                phi = self.phi(ga)
                r1 = ga - ya + lam[:, None] * g
                ok = (np.abs(phi) < _PHI_TOL) & (np.abs(r1).max(axis=1) < _TANGENT_TOL)
                if ok.all():
                    break
                J = np.zeros((ya.shape[0], d + 1, d + 1))
                J[:, :d, :d] = np.eye(d) + lam[:, None, None] * H
                J[:, :d, d] = g
                J[:, d, :d] = g
                rhs = np.concatenate([r1, phi[:, None]], axis=1)[..., None]
                try:
                    step = np.linalg.solve(J, rhs)[..., 0]
                except np.linalg.LinAlgError:
                    bad = np.abs(np.linalg.det(J)) < 1e-300
                    step = np.zeros(rhs.shape[:2])
                    step[~bad] = np.linalg.solve(J[~bad], rhs[~bad])[..., 0]
                upd = ~ok
                ga[upd] -= step[upd, :d]
                lam[upd] -= step[upd, d]
            gam[active] = ga
            converged[active] = ok
        dist = np.linalg.norm(y - gam, axis=-1)
        within = converged & (dist <= max_dist * (1.0 + 1e-9))
        return gam, converged, within

    def project(self, y, max_dist=None):
        """Closest point on Gamma for a batch of collar points.

        ``max_dist`` bounds the accepted |y - gamma|; defaults to the strict
        tube contract a.  Internal callers pass a relaxed bound (< reach).
        """
        if max_dist is None:
            max_dist = self.a
        y = np.atleast_2d(np.asarray(y, dtype=float))
        gam, converged, within = self.try_project(y, max_dist)
        if not converged.all():
            n_bad = int((~converged).sum())
            phi0 = np.abs(self.phi(y[~converged]))
            if np.all(phi0 > max_dist * self.grad_min):
                raise OutsideTube(
                    f"{n_bad} point(s) provably farther than {max_dist} "
                    "from the interface")
            raise NoConvergence(
                f"projection did not converge for {n_bad} point(s) "
                f"in {_PROJECT_MAX_ITER} iterations")
        if not within.all():
            dist = np.linalg.norm(y - gam, axis=-1)
            raise OutsideTube(
                f"projected distance {dist.max():.3e} exceeds bound {max_dist:.3e}")
        return gam

    def signed_distance(self, y, max_dist=None):
        """Signed distance to Gamma, negative inside the inclusion."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        gam = self.project(y, max_dist=max_dist)
        return np.einsum("ij,ij->i", y - gam, self.normal(gam))

    def try_lambda_inverse(self, y, max_dist):
        """Soft collar-chart inverse: (P(y), d(y), ok).  Rows with ok False
        carry the fallback P = y, d = sign(phi) * max_dist."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        gam, _, ok = self.try_project(y, max_dist)
        d = np.where(ok, 0.0, np.sign(self.phi(y)) * max_dist)
        if ok.any():
            d[ok] = np.einsum("ij,ij->i", y[ok] - gam[ok], self.normal(gam[ok]))
        return gam, d, ok

    def lambda_map(self, gamma, s):
        """Collar chart Lambda(gamma, s) = gamma + s n(gamma)."""
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        s = np.asarray(s, dtype=float)
        if np.any(np.abs(s) >= self.a * (1.0 + 1e-12)):
            raise OutsideTube(f"|s| must stay below the tube half-width {self.a}")
        return gamma + np.atleast_1d(s)[:, None] * self.normal(gamma)

    def lambda_inverse(self, x, max_dist=None):
        """Inverse collar chart: x -> (P(x), d(x))."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gam = self.project(x, max_dist=max_dist)
        d = np.einsum("ij,ij->i", x - gam, self.normal(gam))
        return gam, d

    # -- curvature -------------------------------------------------------------

    def weingarten(self, gamma):
        """Curvature matrix P (H/|g|) P at on-surface points.

        Eigenvalues: the principal curvatures plus one ~0 (normal direction).
        """
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        g = self.grad(gamma)
        gnorm = np.linalg.norm(g, axis=-1)
        if np.any(gnorm < 1e-10):
            raise DegenerateGradient("grad phi vanishes on the interface sample")
        n = g / gnorm[:, None]
        P = np.eye(self.dim)[None] - n[:, :, None] * n[:, None, :]
        H = self.hess(gamma)
        return np.einsum("nij,njk,nkl->nil", P, H / gnorm[:, None, None], P)

    def curvatures(self, gamma):
        """Principal curvatures, shape (n, d-1), sorted descending."""
        L = self.weingarten(gamma)
        ev = np.linalg.eigvalsh(L)
        # drop the eigenvalue closest to zero (normal direction)
        idx = np.argmin(np.abs(ev), axis=1)
        keep = np.ones_like(ev, dtype=bool)
        keep[np.arange(ev.shape[0]), idx] = False
        out = ev[keep].reshape(ev.shape[0], self.dim - 1)
        return out[:, ::-1]

    def projection_jacobian(self, x, max_dist=None):
        """DP(x), D(n o P)(x) and (P(x), d(x)) for collar points.

        DP = (I + d L)^(-1) (I - n (x) n),  D(n o P) = L (I + d L)^(-1),
        with L, n evaluated at the base point.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gam, d = self.lambda_inverse(x, max_dist=max_dist)
        n = self.normal(gam)
        L = self.weingarten(gam)
        eye = np.eye(self.dim)[None]
        inv = np.linalg.inv(eye + d[:, None, None] * L)
        P = eye - n[:, :, None] * n[:, None, :]
        return inv @ P, L @ inv, gam, d

    # -- surface sampling ------------------------------------------------------

    def radial_solve(self, directions):
        """Radius r(w) with phi(center + r w) = 0 for unit directions w."""
        w = np.atleast_2d(np.asarray(directions, dtype=float))
        lo = np.full(w.shape[0], self.radial_bracket[0])
        hi = np.full(w.shape[0], self.radial_bracket[1])
        flo = self.phi(self.center + lo[:, None] * w)
        fhi = self.phi(self.center + hi[:, None] * w)
        if np.any(flo >= 0) or np.any(fhi <= 0):
            raise NoConvergence("radial bracket does not straddle the interface")
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            fm = self.phi(self.center + mid[:, None] * w)
            neg = fm < 0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
            if (hi - lo).max() < 1e-15:
                break
        r = 0.5 * (lo + hi)
        # Newton polish
        for _ in range(3):
            pts = self.center + r[:, None] * w
            dr = self.phi(pts) / np.einsum("ij,ij->i", self.grad(pts), w)
            r = r - dr
        return r

    def _build_samples(self, n):
        if self.dim == 2:
            theta = 2.0 * np.pi * np.arange(n) / n
            e = np.stack([np.cos(theta), np.sin(theta)], axis=1)
            eperp = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
            r = self.radial_solve(e)
            pts = self.center + r[:, None] * e
            g = self.grad(pts)
            rp = -r * np.einsum("ij,ij->i", g, eperp) / np.einsum("ij,ij->i", g, e)
            tangent = rp[:, None] * e + r[:, None] * eperp
            w = np.linalg.norm(tangent, axis=1) * (2.0 * np.pi / n)
            return SurfaceSamples(pts, self.normal(pts), w)
        # 3D: Gauss-Legendre in u = cos(theta), uniform azimuth
        u_nodes, u_wts = np.polynomial.legendre.leggauss(n)
        n_az = 2 * n
        az = 2.0 * np.pi * np.arange(n_az) / n_az
        U, A = np.meshgrid(u_nodes, az, indexing="ij")
        WU = np.broadcast_to(u_wts[:, None], U.shape)
        su = np.sqrt(1.0 - U**2)
        w_dir = np.stack([su * np.cos(A), su * np.sin(A), U], axis=-1).reshape(-1, 3)
        wu = (WU * (2.0 * np.pi / n_az)).reshape(-1)
        r = self.radial_solve(w_dir)
        pts = self.center + r[:, None] * w_dir
        g = self.grad(pts)
        # tangents of the (u, az) parametrization via implicit differentiation
        uu, aa = U.reshape(-1), A.reshape(-1)
        s = np.sqrt(1.0 - uu**2)
        dw_du = np.stack([-uu / s * np.cos(aa), -uu / s * np.sin(aa),
                          np.ones_like(uu)], axis=1)
        dw_da = np.stack([-s * np.sin(aa), s * np.cos(aa), np.zeros_like(uu)], axis=1)
        gw = np.einsum("ij,ij->i", g, w_dir)
        r_u = -r * np.einsum("ij,ij->i", g, dw_du) / gw
        r_a = -r * np.einsum("ij,ij->i", g, dw_da) / gw
        t_u = r_u[:, None] * w_dir + r[:, None] * dw_du
        t_a = r_a[:, None] * w_dir + r[:, None] * dw_da
        jac = np.linalg.norm(np.cross(t_u, t_a), axis=1)
        return SurfaceSamples(pts, self.normal(pts), jac * wu)

    def surface_samples(self, n=None):
        """Deterministic interface quadrature, refined until self-error < 1e-6.

        With ``n`` given the refinement loop is skipped and exactly that
        parameter resolution is used.
        """
        if n is not None:
            if n not in self._sample_cache:
                self._sample_cache[n] = self._build_samples(n)
            return self._sample_cache[n]
        if "auto" in self._sample_cache:
            return self._sample_cache["auto"]
        n_cur = 64 if self.dim == 2 else 12
        cur = self._build_samples(n_cur)
        while True:
            nxt = self._build_samples(2 * n_cur)
            if abs(nxt.measure - cur.measure) < 1e-6 * max(1.0, abs(nxt.measure)):
                break
            n_cur *= 2
            cur = nxt
            if n_cur > 4096:
                break
        self._sample_cache["auto"] = cur
        return cur

    def offset_surface_samples(self, delta, n=None):
        """Exact parallel-surface quadrature at signed offset ``delta``.

        Offset points keep their base normals; weights stretch by
        prod_i (1 + delta * kappa_i) (Steiner).
        """
        base = self.surface_samples(n)
        kap = self.curvatures(base.points)
        stretch = np.prod(1.0 + delta * kap, axis=1)
        if np.any(stretch <= 0):
            raise OutsideTube(f"offset {delta} exceeds the curvature radius")
        return SurfaceSamples(base.points + delta * base.normals,
                              base.normals, base.weights * stretch)

    def inclusion_volume(self):
        """|Y2| via the exact formula when known, else radial quadrature."""
        if self._exact_volume is not None:
            return float(self._exact_volume)
        smp = self.surface_samples()
        # divergence theorem with F = (y - c)/d:  |Y2| = (1/d) int_Gamma (y-c).n
        rel = smp.points - self.center
        return float(np.einsum("ij,ij->i", rel, smp.normals) @ smp.weights) / self.dim

    def min_boundary_clearance(self):
        smp = self.surface_samples()
        return float(min(smp.points.min(), (1.0 - smp.points).min()))

    def cache_key(self):
        return {"dim": self.dim, "tube_width": self.a, **self.params}


# -- built-in cells -------------------------------------------------------------


def disk_cell(radius=0.25, center=None, dim=2, tube_width=None):
    """Disk (2D) or ball (3D) inclusion; phi = |y - c| - R."""
    if center is None:
        center = [0.5] * dim
    c = np.asarray(center, dtype=float)
    R = float(radius)

    def phi(y):
        return np.linalg.norm(y - c, axis=-1) - R

    def grad(y):
        u = y - c
        return u / np.linalg.norm(u, axis=-1, keepdims=True)

    def hess(y):
        u = y - c
        r = np.linalg.norm(u, axis=-1)
        n = u / r[..., None]
        eye = np.broadcast_to(np.eye(dim), y.shape + (dim,))
        return (eye - n[..., :, None] * n[..., None, :]) / r[..., None, None]

    vol = math.pi * R**2 if dim == 2 else 4.0 / 3.0 * math.pi * R**3
    return ImplicitSurfaceCell(
        dim, phi, grad, hess, c, (R / 4, min(0.49, 4 * R)),
        tube_width=tube_width, exact_volume=vol,
        params={"kind": "disk", "radius": R, "center": list(map(float, c))})


def ellipse_cell(semi_axes=(0.3, 0.2), center=None, tube_width=None):
    """Axis-aligned ellipse/ellipsoid; phi = sum ((y_i-c_i)/a_i)^2 - 1."""
    ax = np.asarray(semi_axes, dtype=float)
    dim = ax.size
    if center is None:
        center = [0.5] * dim
    c = np.asarray(center, dtype=float)
    inv2 = 1.0 / ax**2

    def phi(y):
        return np.sum((y - c) ** 2 * inv2, axis=-1) - 1.0

    def grad(y):
        return 2.0 * (y - c) * inv2

    def hess(y):
        return np.broadcast_to(np.diag(2.0 * inv2), y.shape + (dim,)).copy()

    vol = math.pi * ax.prod() if dim == 2 else 4.0 / 3.0 * math.pi * ax.prod()
    return ImplicitSurfaceCell(
        dim, phi, grad, hess, c, (ax.min() / 4, min(0.49, 4 * ax.max())),
        tube_width=tube_width, exact_volume=vol,
        params={"kind": "ellipse", "semi_axes": list(map(float, ax)),
                "center": list(map(float, c))})


def blob_cell(radius=0.25, wobble=0.05, modes=3, center=None, tube_width=None):
    """2D star-shaped inclusion r(theta) = R (1 + wobble * cos(modes * theta))."""
    if center is None:
        center = [0.5, 0.5]
    c = np.asarray(center, dtype=float)
    R, d0, m = float(radius), float(wobble), int(modes)
    if abs(d0) * (1 + m * m) >= 0.8:
        raise ValueError("wobble too large for a smooth star-shaped blob")

    def _polar(y):
        u = y - c
        r = np.linalg.norm(u, axis=-1)
        th = np.arctan2(u[..., 1], u[..., 0])
        return u, r, th

    def phi(y):
        _, r, th = _polar(y)
        return r - R * (1.0 + d0 * np.cos(m * th))

    def grad(y):
        u, r, th = _polar(y)
        er = u / r[..., None]
        dth = np.stack([-u[..., 1], u[..., 0]], axis=-1) / (r**2)[..., None]
        return er + (R * d0 * m * np.sin(m * th))[..., None] * dth

    def hess(y):
        u, r, th = _polar(y)
        er = u / r[..., None]
        eye = np.broadcast_to(np.eye(2), y.shape + (2,))
        hr = (eye - er[..., :, None] * er[..., None, :]) / r[..., None, None]
        dth = np.stack([-u[..., 1], u[..., 0]], axis=-1) / (r**2)[..., None]
        u1, u2 = u[..., 0], u[..., 1]
        r4 = r**4
        hth = np.empty(y.shape + (2,))
        hth[..., 0, 0] = 2.0 * u1 * u2 / r4
        hth[..., 0, 1] = (u2**2 - u1**2) / r4
        hth[..., 1, 0] = hth[..., 0, 1]
        hth[..., 1, 1] = -2.0 * u1 * u2 / r4
        amp = R * d0 * m
        s, co = np.sin(m * th), np.cos(m * th)
        return (hr
                + amp * m * co[..., None, None] * dth[..., :, None] * dth[..., None, :]
                + amp * s[..., None, None] * hth)

    return ImplicitSurfaceCell(
        2, phi, grad, hess, c, (R * (1 - abs(d0)) / 4, min(0.49, 4 * R)),
        tube_width=tube_width,
        params={"kind": "blob", "radius": R, "wobble": d0, "modes": m,
                "center": list(map(float, c))})


def offset_cell(base: ImplicitSurfaceCell, delta):
    """Parallel-surface cell: the inclusion boundary moved by ``delta`` along
    its normals.  phi is the (extended) signed distance to the base interface
    minus delta; gradient and Hessian come from the base projection identities.
    Valid while |delta| stays well inside the base reach.
    """
    if abs(delta) >= 0.45 * base.reach:
        raise OutsideTube(f"offset {delta} too large for base reach {base.reach}")
    valid = 0.95 * base.reach

    def phi(y):
        y2 = np.atleast_2d(np.asarray(y, dtype=float))
        _, d, _ = base.try_lambda_inverse(y2, valid)
        out = d - delta
        return out.reshape(np.shape(y)[:-1])

    def grad(y):
        y2 = np.atleast_2d(np.asarray(y, dtype=float))
        gam = base.project(y2, max_dist=valid)
        return base.normal(gam).reshape(np.shape(y))

    def hess(y):
        y2 = np.atleast_2d(np.asarray(y, dtype=float))
        _, dnp, _, _ = base.projection_jacobian(y2, max_dist=valid)
        return dnp.reshape(np.shape(y) + (base.dim,))

    params = {"kind": "offset", "delta": float(delta), "base": base.params}
    cell = ImplicitSurfaceCell.__new__(ImplicitSurfaceCell)
    cell.dim = base.dim
    cell._phi, cell._grad, cell._hess = phi, grad, hess
    cell.center = base.center
    cell.radial_bracket = base.radial_bracket
    cell.params = params
    cell._sample_cache = {}
    kap = base.curvatures(base.surface_samples().points)
    kmax = float(np.abs(kap / (1.0 + delta * kap)).max())
    clearance = None  # computed from offset samples below
    cell._exact_volume = None
    smp = base.offset_surface_samples(delta)
    cell._sample_cache["auto"] = smp
    clearance = float(min(smp.points.min(), (1.0 - smp.points).min()))
    cell.reach = min(1.0 / kmax if kmax > 0 else np.inf, clearance)
    cell.a = min(0.5 * cell.reach, base.a)
    cell.grad_max = 1.0
    cell.grad_min = 1.0
    # Steiner: |Y2(delta)| = |Y2(0)| + int_0^delta |Gamma_s| ds
    base_smp = base.surface_samples()
    kapb = base.curvatures(base_smp.points)
    if base.dim == 2:
        growth = base_smp.weights @ (delta + 0.5 * delta**2 * kapb[:, 0])
    else:
        k1, k2 = kapb[:, 0], kapb[:, 1]
        growth = base_smp.weights @ (delta + 0.5 * delta**2 * (k1 + k2)
                                     + delta**3 / 3.0 * k1 * k2)
    cell._exact_volume = base.inclusion_volume() + float(growth)
    return cell


# -- periodic tiling ------------------------------------------------------------


def int_frac(x, epsilon):
    """Decompose x = eps * (k + frac) with integer k and frac in [0,1)^d."""
    x = np.asarray(x, dtype=float)
    scaled = x / epsilon
    k = np.floor(scaled).astype(np.int64)
    frac = scaled - k
    # rounding can push frac to exactly 1.0 when x/eps sits just below an integer
    wrap = frac >= 1.0
    k[wrap] += 1
    frac[wrap] -= 1.0
    return k, frac


class PeriodicDomain:
    """epsilon-tiling of a cell over an axis-aligned box.

    ``cells`` is the lattice Z_eps of vectors k with eps*(closure(Y)+k)
    strictly inside the open box, decided in exact rational arithmetic.
    """

    def __init__(self, cell: ImplicitSurfaceCell, epsilon, box, cells):
        self.cell = cell
        self.epsilon = float(epsilon)
        self.box = np.asarray(box, dtype=float)  # (d, 2)
        self.cells = np.asarray(cells, dtype=np.int64)  # (m, d)
        self._samples_cache = {}

    @property
    def dim(self):
        return self.cell.dim

    @property
    def tube_halfwidth(self):
        """eps * a, the macro-coordinates tube half-width."""
        return self.epsilon * self.cell.a

    def cell_coords(self, x):
        """Map macro points to (k, xi) with x = eps*(k + xi)."""
        return int_frac(x, self.epsilon)

    def to_macro(self, k, xi):
        return self.epsilon * (np.asarray(k, dtype=float) + xi)

    def covered(self, x):
        """True where x lies in a tiled cell (the truncated domain)."""
        k, _ = self.cell_coords(np.atleast_2d(x))
        keys = {tuple(row) for row in self.cells}
        return np.array([tuple(row) in keys for row in k])

    # scaled tubular-neighborhood operators; all reduce to cell coordinates

    def phi_cellwise(self, x):
        _, xi = self.cell_coords(np.atleast_2d(x))
        return self.cell.phi(xi)

    def signed_distance(self, x, max_dist_cell=None):
        k, xi = self.cell_coords(np.atleast_2d(x))
        return self.epsilon * self.cell.signed_distance(xi, max_dist=max_dist_cell)

    def project(self, x, max_dist_cell=None):
        k, xi = self.cell_coords(np.atleast_2d(x))
        gam = self.cell.project(xi, max_dist=max_dist_cell)
        return self.epsilon * (k + gam)

    def normal(self, x):
        _, xi = self.cell_coords(np.atleast_2d(x))
        gam = self.cell.project(xi, max_dist=0.95 * self.cell.reach)
        return self.cell.normal(gam)

    def weingarten(self, gamma):
        """Curvature matrix of the scaled interface: L_eps = L_cell / eps."""
        _, xi = self.cell_coords(np.atleast_2d(gamma))
        return self.cell.weingarten(xi) / self.epsilon

    def lambda_map(self, gamma, r):
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if np.any(np.abs(r) >= self.tube_halfwidth * (1.0 + 1e-12)):
            raise OutsideTube("|r| must stay below eps*a")
        return gamma + r[:, None] * self.normal(gamma)

    def lambda_inverse(self, x, max_dist_cell=None):
        k, xi = self.cell_coords(np.atleast_2d(x))
        gam, d = self.cell.lambda_inverse(xi, max_dist=max_dist_cell)
        return self.epsilon * (k + gam), self.epsilon * d

    def try_collar_inverse(self, x):
        """Soft macro-coordinates collar inverse: (P(x), d(x), n(P(x)), ok).

        Valid through most of the reach, not just the tube; rows with ok
        False carry P = x, |d| = 0.95*eps*reach with the phase sign, n = e1.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k, xi = self.cell_coords(x)
        gam, d, ok = self.cell.try_lambda_inverse(xi, 0.95 * self.cell.reach)
        normals = np.zeros_like(x)
        normals[:, 0] = 1.0
        if ok.any():
            normals[ok] = self.cell.normal(gam[ok])
        return (self.epsilon * (k + gam), self.epsilon * d, normals, ok)

    def projection_jacobian(self, x, max_dist_cell=None):
        """DP, D(n o P), base point and signed distance in macro coordinates.

        DP is scale invariant; D(n o P) scales like 1/eps... both are
        assembled from cell quantities: DP_eps(x) = DP_cell(xi) and
        D(n o P)_eps(x) = D(n o P)_cell(xi) / eps.
        """
        k, xi = self.cell_coords(np.atleast_2d(x))
        dp, dnp, gam, d = self.cell.projection_jacobian(xi, max_dist=max_dist_cell)
        return dp, dnp / self.epsilon, self.epsilon * (k + gam), self.epsilon * d

    def in_tube(self, x, fraction=1.0):
        """Conservative tube membership test (no error), |d| < fraction*eps*a."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, xi = self.cell_coords(x)
        _, d, ok = self.cell.try_lambda_inverse(xi, 0.95 * self.cell.reach)
        return ok & (np.abs(d) < fraction * self.cell.a) & self.covered(x)

    def surface_samples(self, n=None):
        """Quadrature on Gamma_eps: cell samples scaled into every tiled cell.

        Normals equal the cell normals (periodicity); weights scale by
        eps^(d-1).
        """
        key = ("samples", n)
        if key not in self._samples_cache:
            base = self.cell.surface_samples(n)
            pts = (self.epsilon * (self.cells[:, None, :] + base.points[None, :, :])
                   ).reshape(-1, self.dim)
            nrm = np.tile(base.normals, (len(self.cells), 1))
            wts = np.tile(base.weights * self.epsilon ** (self.dim - 1),
                          len(self.cells))
            self._samples_cache[key] = SurfaceSamples(pts, nrm, wts)
        return self._samples_cache[key]

    def tiled_volume(self):
        return len(self.cells) * self.epsilon ** self.dim


def tile(cell: ImplicitSurfaceCell, epsilon, box) -> PeriodicDomain:
    """Tile the box with eps-scaled cells, keeping k with eps*(Ybar+k) in the
    open box (exact rational arithmetic on the lattice bounds)."""
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError("box must be (d, 2) of (lo, hi) pairs")
    if box.shape[0] != cell.dim:
        raise ValueError("box dimension does not match the cell")
    eps = Fraction(epsilon).limit_denominator(10**12)
    ranges = []
    for lo, hi in box:
        lo_f, hi_f = Fraction(lo).limit_denominator(10**12), Fraction(hi).limit_denominator(10**12)
        if eps > hi_f - lo_f:
            raise EmptyTiling(f"epsilon {epsilon} exceeds a box side {hi - lo}")
        # strict inclusion of the closed cell: eps*k > lo and eps*(k+1) < hi
        k_lo = lo_f / eps
        k_min = int(k_lo) + 1 if k_lo == int(k_lo) else math.ceil(k_lo)
        k_hi = hi_f / eps - 1
        k_max = int(k_hi) - 1 if k_hi == int(k_hi) else math.floor(k_hi)
        ranges.append(range(k_min, k_max + 1))
    grids = np.meshgrid(*[np.array(list(r), dtype=np.int64) for r in ranges],
                        indexing="ij")
    cells = np.stack([g.reshape(-1) for g in grids], axis=1) if grids[0].size else \
        np.empty((0, cell.dim), dtype=np.int64)
    if cells.shape[0] == 0:
        raise EmptyTiling(
            f"no full cell of size {epsilon} fits strictly inside the box")
    return PeriodicDomain(cell, epsilon, box, cells)
