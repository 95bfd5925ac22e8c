"""Periodic cell problems and effective coefficients.

The effective conductivity is the variational minimum

    kappa_h[i, j] = kappa1 * int_{Y1} (grad tau_j + e_j) . e_i dy,

with tau_j the periodic zero-mean minimizer of int_{Y1} |grad tau + e_j|^2.
The inclusion carries no matrix-scale conductivity (its eps^2-scaled
coefficient vanishes in the limit), so only the connected matrix phase Y1
enters.  Discretization: Q1 elements on a regular periodic grid with cut
elements weighted by their Y1 volume fraction (penalization-free removal:
fully interior inclusion elements drop out of the form).  The discrete
minimum energy equals kappa_h[j, j]/kappa1 exactly, which doubles as a
consistency check, and mesh error is controlled by an m vs 2m Richardson
pair.

Effective sources are plain integrals over the current phases,

    f_h = int_{Y1} f1 dy,     theta_h = int_{Y1} theta1_init dy,
    f_Gamma = int_Gamma (L v + kappa2 grad_y theta2 . n) dsigma,

with n the outward normal of the inclusion and the flux probed one-sidedly
from inside.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CacheCorrupt,
    GradientUnavailable,
    MeshTooCoarse,
    SolverDiverged,
)
from .geometry import ImplicitSurfaceCell

# Q1 element stiffness on a square (h-independent in 2D); local node order
# (0,0), (1,0), (1,1), (0,1)
_K_REF = np.array([
    [4.0, -1.0, -2.0, -1.0],
    [-1.0, 4.0, -1.0, -2.0],
    [-2.0, -1.0, 4.0, -1.0],
    [-1.0, -2.0, -1.0, 4.0],
]) / 6.0
# int_e dphi_i/dx and /dy over the element, divided by h
_BX = np.array([-0.5, 0.5, 0.5, -0.5])
_BY = np.array([-0.5, -0.5, 0.5, 0.5])


@dataclass
class CellState:
    """Micro discretization snapshot of the (possibly evolved) cell.

    ``geometry`` is None for the inclusion-free cell (Y2 empty).  ``alpha``
    holds per-element Y1 volume fractions on the m x m grid.
    """

    geometry: ImplicitSurfaceCell | None
    m: int
    subsamples: int = 8
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        m, ss = self.m, self.subsamples
        if self.geometry is not None and self.geometry.dim != 2:
            raise NotImplementedError("cell problems are solved in 2D")
        if self.geometry is None:
            self.alpha = np.ones((m, m))
            return
        h = 1.0 / m
        sub = (np.arange(ss) + 0.5) / ss * h
        ex, ey = np.meshgrid(sub, sub, indexing="ij")
        offs = np.stack([ex.reshape(-1), ey.reshape(-1)], axis=1)
        corners = np.stack(np.meshgrid(np.arange(m) * h, np.arange(m) * h,
                                       indexing="ij"), axis=-1).reshape(-1, 2)
        pts = (corners[:, None, :] + offs[None, :, :]).reshape(-1, 2)
        inside_matrix = self.geometry.phi(pts) > 0.0
        self.alpha = inside_matrix.reshape(m, m, ss * ss).mean(axis=2)

    @property
    def volume_fractions(self):
        """(|Y1|, |Y2|) from the element fractions; they sum to one exactly."""
        y1 = float(self.alpha.mean())
        return y1, 1.0 - y1

    def interface_samples(self):
        if self.geometry is None:
            raise GradientUnavailable("cell has no inclusion interface")
        return self.geometry.surface_samples()


@dataclass
class EffectiveTensor:
    """kappa_h with its correctors and solve metadata."""

    kappa_h: np.ndarray          # (d, d)
    correctors: np.ndarray       # (d, m, m) nodal periodic fields, zero mean
    energies: np.ndarray         # (d,) discrete minimum energies / kappa1
    volume_fractions: tuple
    kappa1: float
    m: int
    meta: dict = field(default_factory=dict)

    def check_invariants(self, tol_sym=1e-8):
        k = self.kappa_h
        assert np.abs(k - k.T).max() <= tol_sym, "tensor not symmetric"
        ev = np.linalg.eigvalsh(k)
        assert ev.min() > 0.0, "tensor not positive definite"
        assert ev.max() <= self.kappa1 * (1 + 1e-10), \
            "matrix-phase conductivity exceeded"
        return True


def _assemble(cs: CellState, kappa1):
    m = cs.m
    h = 1.0 / m
    n_nodes = m * m
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    n00 = (ii % m) * m + (jj % m)
    n10 = ((ii + 1) % m) * m + (jj % m)
    n11 = ((ii + 1) % m) * m + ((jj + 1) % m)
    n01 = (ii % m) * m + ((jj + 1) % m)
    conn = np.stack([n00, n10, n11, n01], axis=-1).reshape(-1, 4)
    alpha = cs.alpha.reshape(-1)
    keep = alpha > 0.0
    conn_k = conn[keep]
    coef = kappa1 * alpha[keep]
    rows = np.repeat(conn_k, 4, axis=1).reshape(-1)
    cols = np.tile(conn_k, (1, 4)).reshape(-1)
    vals = (coef[:, None, None] * _K_REF[None]).reshape(-1)
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()
    # loads for the d unit directions: b_i = -kappa alpha int_e e_j . grad phi_i
    b = np.zeros((2, n_nodes))
    np.add.at(b[0], conn_k.reshape(-1),
              -(coef[:, None] * (_BX[None] * h)).reshape(-1))
    np.add.at(b[1], conn_k.reshape(-1),
              -(coef[:, None] * (_BY[None] * h)).reshape(-1))
    active = np.zeros(n_nodes, dtype=bool)
    active[conn_k.reshape(-1)] = True
    return K, b, conn, alpha, active


def solve_cell_problem(cs: CellState, kappa1, j) -> np.ndarray:
    """Corrector tau_j: periodic zero-mean minimizer of the direction-j
    energy.  Returns the (m, m) nodal field."""
    tensor = _solve_all(cs, kappa1)
    return tensor.correctors[j]


def _solve_all(cs: CellState, kappa1) -> EffectiveTensor:
    m = cs.m
    h = 1.0 / m
    K, b, conn, alpha, active = _assemble(cs, kappa1)
    n_nodes = m * m
    idx_active = np.nonzero(active)[0]
    pin = idx_active[0]
    free = idx_active[idx_active != pin]
    Kff = K[free][:, free].tocsc()
    correctors = np.zeros((2, n_nodes))
    for j in range(2):
        rhs = b[j][free]
        try:
            sol = spla.spsolve(Kff, rhs)
        except Exception as exc:  # singular factorization and friends
            raise SolverDiverged(f"cell solve failed: {exc}")
        if not np.all(np.isfinite(sol)):
            raise SolverDiverged("cell solve produced non-finite values")
        tau = np.zeros(n_nodes)
        tau[free] = sol
        resid = np.abs(K @ tau - b[j])[active].max()
        scale = max(kappa1, np.abs(b[j]).max(), 1.0)
        if resid > 1e-10 * scale:
            raise SolverDiverged(
                f"cell solve residual {resid:.2e} above tolerance")
        # zero-mean gauge over Y1 (node weights from adjacent element fractions)
        w = np.zeros(n_nodes)
        np.add.at(w, conn.reshape(-1),
                  np.repeat(alpha, 4) * (h * h / 4.0))
        tau -= (w @ tau) / w.sum()
        correctors[j] = tau
    # kappa_h[i, j] = kappa1 (int_Y1 d_i tau_j + delta_ij |Y1|)
    kap = np.zeros((2, 2))
    keep = alpha > 0.0
    conn_k = conn[keep]
    a_k = alpha[keep]
    y1 = float(alpha.mean())
    energies = np.zeros(2)
    for j in range(2):
        tl = correctors[j][conn_k]
        dx_int = (tl @ _BX) * h
        dy_int = (tl @ _BY) * h
        kap[0, j] = kappa1 * (np.sum(a_k * dx_int) + (j == 0) * y1)
        kap[1, j] = kappa1 * (np.sum(a_k * dy_int) + (j == 1) * y1)
        # discrete energy int_Y1 |grad tau + e_j|^2 via the element stiffness
        quad = np.einsum("ei,ij,ej->e", tl, _K_REF, tl)
        cross = 2.0 * (dx_int if j == 0 else dy_int)
        energies[j] = float(np.sum(a_k * (quad + cross)) + y1)
    return EffectiveTensor(
        kappa_h=kap, correctors=correctors.reshape(2, m, m),
        energies=energies, volume_fractions=cs.volume_fractions,
        kappa1=float(kappa1), m=m)


def effective_tensor(cell: ImplicitSurfaceCell | None, kappa1, m=32,
                     subsamples=8, refine_check=True) -> EffectiveTensor:
    """Solve correctors and assemble kappa_h; with ``refine_check`` the m vs
    2m energies must agree within 5% (else MeshTooCoarse) and the Richardson
    value is recorded."""
    coarse = _solve_all(CellState(cell, m, subsamples), kappa1)
    if refine_check and cell is not None:
        fine = _solve_all(CellState(cell, 2 * m, subsamples), kappa1)
        diag_c = np.diag(coarse.kappa_h)
        diag_f = np.diag(fine.kappa_h)
        rel = np.abs(diag_f - diag_c) / np.abs(diag_f)
        if rel.max() > 0.05:
            raise MeshTooCoarse(
                f"m={m} vs {2 * m} effective values differ by "
                f"{rel.max():.1%} (> 5%)")
        richardson = fine.kappa_h + (fine.kappa_h - coarse.kappa_h) / 3.0
        fine.meta.update({
            "m_coarse": m, "kappa_h_coarse": coarse.kappa_h.tolist(),
            "richardson": richardson.tolist(),
            "refinement_rel_diff": float(rel.max()),
        })
        fine.check_invariants()
        return fine
    coarse.check_invariants()
    return coarse


def effective_sources(f1, theta1_init, cs: CellState):
    """(f_h, theta_h): integrals of the matrix-phase data over Y1."""
    m = cs.m
    h = 1.0 / m
    centers = (np.stack(np.meshgrid(np.arange(m), np.arange(m),
                                    indexing="ij"), axis=-1)
               .reshape(-1, 2) + 0.5) * h
    w = cs.alpha.reshape(-1) * h * h

    def integrate(f):
        if f is None:
            return 0.0
        if callable(f):
            return float(np.asarray(f(centers), dtype=float) @ w)
        return float(f) * float(w.sum())

    return integrate(f1), integrate(theta1_init)


def interface_source(theta2, v_limit, latent, kappa2, cs: CellState,
                     probe_step=None):
    """f_Gamma = int_Gamma (L v + kappa2 grad theta2 . n) dsigma.

    ``theta2`` is an evaluator on cell points (the micro temperature); the
    normal flux is probed one-sidedly from inside the inclusion with a
    three-point quadratic stencil, exact for quadratic radial fields.
    ``v_limit`` is a scalar or an evaluator on interface points.
    """
    smp = cs.interface_samples()
    v = (np.asarray(v_limit(smp.points), dtype=float)
         if callable(v_limit) else np.full(len(smp), float(v_limit)))
    total = latent * float(v @ smp.weights)
    if kappa2 != 0.0:
        if theta2 is None:
            raise GradientUnavailable(
                "interface flux requested without micro temperature data")
        hp = probe_step if probe_step is not None else 1.0 / cs.m
        g0 = np.asarray(theta2(smp.points), dtype=float)
        g1 = np.asarray(theta2(smp.points - hp * smp.normals), dtype=float)
        g2 = np.asarray(theta2(smp.points - 2 * hp * smp.normals), dtype=float)
        flux = (3.0 * g0 - 4.0 * g1 + g2) / (2.0 * hp)
        total += kappa2 * float(flux @ smp.weights)
    return total


# -- tensor cache ----------------------------------------------------------------


def cache_root():
    return os.environ.get("MBHOMOG_CACHE_DIR",
                          os.path.join(os.getcwd(), ".mbhomog_cache"))


def _canonical_key(cell, kappa1, m, subsamples):
    key = {"cell": None if cell is None else cell.cache_key(),
           "kappa1": float(kappa1), "m": int(m),
           "subsamples": int(subsamples), "layout": 1}
    blob = json.dumps(key, sort_keys=True, separators=(",", ":"))
    return key, hashlib.sha256(blob.encode()).hexdigest()[:16]


class TensorCache:
    """Content-addressed store: <root>/<hash>/tensor.json + correctors.bin.

    Entries failing their byte hash are quarantined (renamed aside) and
    re-solved on the next request.
    """

    def __init__(self, root=None):
        self.root = root or cache_root()

    def _entry_dir(self, digest):
        return os.path.join(self.root, digest)

    def list_entries(self):
        if not os.path.isdir(self.root):
            return []
        out = []
        for name in sorted(os.listdir(self.root)):
            meta_path = os.path.join(self.root, name, "tensor.json")
            if os.path.isfile(meta_path):
                with open(meta_path) as fh:
                    meta = json.load(fh)
                out.append({"hash": name, "key": meta.get("key"),
                            "kappa_h": meta.get("kappa_h")})
        return out

    def purge(self):
        if os.path.isdir(self.root):
            shutil.rmtree(self.root)
        return True

    def _load(self, digest, key):
        entry = self._entry_dir(digest)
        meta_path = os.path.join(entry, "tensor.json")
        bin_path = os.path.join(entry, "correctors.bin")
        if not (os.path.isfile(meta_path) and os.path.isfile(bin_path)):
            return None
        with open(meta_path) as fh:
            meta = json.load(fh)
        with open(bin_path, "rb") as fh:
            raw = fh.read()
        digest_bin = hashlib.sha256(raw).hexdigest()
        if meta.get("key") != key or \
                meta["correctors"]["sha256"] != digest_bin:
            quarantine = entry + ".quarantined"
            n = 0
            while os.path.exists(f"{quarantine}.{n}"):
                n += 1
            os.rename(entry, f"{quarantine}.{n}")
            raise CacheCorrupt(
                f"cache entry {digest} failed verification; quarantined")
        shape = tuple(meta["correctors"]["shape"])
        correctors = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
        return EffectiveTensor(
            kappa_h=np.array(meta["kappa_h"]), correctors=correctors,
            energies=np.array(meta["energies"]),
            volume_fractions=tuple(meta["volume_fractions"]),
            kappa1=meta["kappa1"], m=meta["m"],
            meta=dict(meta.get("extra", {}), cache_hit=True))

    def _store(self, digest, key, tensor: EffectiveTensor):
        entry = self._entry_dir(digest)
        os.makedirs(entry, exist_ok=True)
        raw = np.ascontiguousarray(tensor.correctors, dtype=np.float64).tobytes()
        with open(os.path.join(entry, "correctors.bin"), "wb") as fh:
            fh.write(raw)
        meta = {
            "key": key,
            "kappa_h": tensor.kappa_h.tolist(),
            "energies": tensor.energies.tolist(),
            "volume_fractions": list(tensor.volume_fractions),
            "kappa1": tensor.kappa1,
            "m": tensor.m,
            "correctors": {"shape": list(tensor.correctors.shape),
                           "dtype": "float64",
                           "sha256": hashlib.sha256(raw).hexdigest()},
            "extra": {k: v for k, v in tensor.meta.items()
                      if isinstance(v, (int, float, str, list, bool))},
        }
        with open(os.path.join(entry, "tensor.json"), "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)

    def get_or_solve(self, cell, kappa1, m=32, subsamples=8,
                     refine_check=False, stats=None):
        key, digest = _canonical_key(cell, kappa1, m, subsamples)
        try:
            hit = self._load(digest, key)
        except CacheCorrupt:
            hit = None
        if hit is not None:
            if stats is not None:
                stats["hits"] = stats.get("hits", 0) + 1
            return hit
        tensor = effective_tensor(cell, kappa1, m=m, subsamples=subsamples,
                                  refine_check=refine_check)
        self._store(digest, key, tensor)
        if stats is not None:
            stats["solves"] = stats.get("solves", 0) + 1
        return tensor
