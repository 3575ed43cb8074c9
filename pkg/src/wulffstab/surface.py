"""Sampled closed hypersurfaces with Euclidean and anisotropic geometry.

Surfaces come from two sources: radial graphs over the sphere (the star
profiles below, sampled by :func:`sample_star`) and level sets of lattice
fields (:func:`extract_level_set`).  Curvature always goes through an
implicit function: with u vanishing on the surface and increasing outward,
the second fundamental form against the anisotropic metric is the ambient
Hessian of u restricted to the tangent space and divided by F(Du), and the
shape operator is its g-inverse, g being the Hessian of the dual quadratic
form at the anisotropic normal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .integrand import perturbation_profile

_FD1 = float(np.finfo(float).eps) ** (1.0 / 3.0)
_FD2 = float(np.finfo(float).eps) ** (1.0 / 4.0)


class SurfaceError(RuntimeError):
    pass


# ---- radius-function catalog ---------------------------------------------


class SphereProfile:
    """Round sphere of radius r."""

    def __init__(self, r=1.0):
        self.r = float(r)

    def __call__(self, dirs):
        return np.full(len(np.atleast_2d(dirs)), self.r)


class WulffProfile:
    """Wulff sphere of radius r: rho(u) = r / F0(u)."""

    def __init__(self, integrand, r=1.0):
        self.integrand = integrand
        self.r = float(r)

    def __call__(self, dirs):
        return self.r / self.integrand.F0(dirs)


class PerturbedWulffProfile:
    """Wulff sphere modulated by a fixed polynomial bump profile.

    rho(u) = (r / F0(u)) * (1 + eps * Y(u)) with Y from the shared profile
    catalog; eps = 0 recovers the exact Wulff sphere.
    """

    def __init__(self, integrand, r=1.0, eps=0.0, profile=3):
        self.integrand = integrand
        self.r = float(r)
        self.eps = float(eps)
        self.profile = int(profile)

    def __call__(self, dirs):
        dirs = np.atleast_2d(dirs)
        base = self.r / self.integrand.F0(dirs)
        return base * (1.0 + self.eps * perturbation_profile(self.profile, dirs))


class DumbbellProfile:
    """Necked star shape rho(u) = neck + (lobe - neck) * u_1^2; degenerate
    enough to stress the one-sided-neighborhood extraction."""

    def __init__(self, neck=0.4, lobe=1.2):
        self.neck = float(neck)
        self.lobe = float(lobe)

    def __call__(self, dirs):
        dirs = np.atleast_2d(dirs)
        return self.neck + (self.lobe - self.neck) * dirs[:, 0] ** 2


# ---- implicit level functions ----------------------------------------------


class StarLevelFn:
    """Ambient level function |x - c| - rho((x-c)/|x-c|) of a star profile.

    Value is analytic; gradient and Hessian by central finite differences
    (first/second-derivative steps scaled to the point).  Negative inside.
    """

    def __init__(self, profile, center):
        self.profile = profile
        self.center = np.asarray(center, dtype=float)

    def value(self, P):
        rel = np.atleast_2d(P) - self.center
        R = np.linalg.norm(rel, axis=1)
        if np.any(R == 0):
            raise SurfaceError("level function undefined at the star center")
        return R - np.asarray(self.profile(rel / R[:, None]), dtype=float)

    def grad(self, P):
        P = np.atleast_2d(P)
        d = P.shape[1]
        scale = np.maximum(np.linalg.norm(P - self.center, axis=1), 1.0)
        h = _FD1 * scale
        g = np.empty((len(P), d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            g[:, i] = (self.value(P + h[:, None] * e)
                       - self.value(P - h[:, None] * e)) / (2.0 * h)
        return g

    def hess(self, P):
        P = np.atleast_2d(P)
        d = P.shape[1]
        scale = np.maximum(np.linalg.norm(P - self.center, axis=1), 1.0)
        h = _FD2 * scale
        H = np.empty((len(P), d, d))
        f0 = self.value(P)
        eye = np.eye(d)
        for i in range(d):
            ei = h[:, None] * eye[i]
            H[:, i, i] = (self.value(P + ei) - 2 * f0 + self.value(P - ei)) / h**2
            for j in range(i + 1, d):
                ej = h[:, None] * eye[j]
                H[:, i, j] = (self.value(P + ei + ej) - self.value(P + ei - ej)
                              - self.value(P - ei + ej) + self.value(P - ei - ej)
                              ) / (4.0 * h**2)
                H[:, j, i] = H[:, i, j]
        return H


class GaugeLevelFn:
    """u(x) = F0(x - c): level sets are the Wulff spheres around c."""

    def __init__(self, integrand, center):
        self.integrand = integrand
        self.center = np.asarray(center, dtype=float)

    def value(self, P):
        return self.integrand.F0(np.atleast_2d(P) - self.center)

    def grad(self, P):
        return self.integrand.grad_F0(np.atleast_2d(P) - self.center)

    def hess(self, P):
        I = self.integrand
        rel = np.atleast_2d(P) - self.center
        if I.kind in ("euclidean", "ellipsoidal"):
            Ainv = np.linalg.inv(I.A)
            F0 = I.F0(rel)
            Av = rel @ Ainv.T
            return (Ainv[None, :, :] / F0[:, None, None]
                    - np.einsum("ni,nj->nij", Av, Av) / F0[:, None, None] ** 3)
        out = I._fd_hess(I.F0, rel)
        return 0.5 * (out + np.swapaxes(out, -1, -2))


class GridFieldFn:
    """Implicit-function view of a lattice scalar field (see FieldSampler)."""

    def __init__(self, sampler):
        self.sampler = sampler

    def value(self, P):
        return self.sampler.value(P)

    def grad(self, P):
        return self.sampler.gradient(P)

    def hess(self, P):
        return self.sampler.hessian(P)


# ---- the sampled-surface container ------------------------------------------


@dataclass
class SampledHypersurface:
    """Quadrature-weighted point cloud of a closed hypersurface.

    Curvature fields are filled by :func:`aniso_curvature`: the anisotropic
    normal, the shape operator in a per-sample tangent basis, its eigenvalues
    kappa (ascending), the mean curvature H = sum kappa, the elementary
    symmetric functions sigma_r, and the squared traceless norm of S.
    """

    points: np.ndarray          # (N, d)
    euclid_normal: np.ndarray   # (N, d), outward unit
    weight: np.ndarray          # (N,), Euclidean quadrature weights
    dim: int
    aniso_normal: np.ndarray = None
    F_n: np.ndarray = None
    tangent: np.ndarray = None        # (N, n, d) rows span the tangent space
    shape_op: np.ndarray = None       # (N, n, n)
    kappas: np.ndarray = None         # (N, n) ascending
    H: np.ndarray = None
    sigma: np.ndarray = None          # (N, n), sigma[:, r-1] = sigma_r
    traceless_sq: np.ndarray = None   # |S - (H/n) id|^2
    flagged: np.ndarray = None        # samples excluded from integrals
    grad_u: np.ndarray = None         # implicit-function derivatives at samples
    hess_u: np.ndarray = None
    integrand: object = None

    @property
    def n_samples(self):
        return len(self.points)

    @property
    def n(self):
        return self.dim - 1

    def area(self, measure="euclidean"):
        return surface_integral(self, np.ones(self.n_samples), measure=measure)

    def flagged_fraction(self):
        if self.flagged is None:
            return 0.0
        return float(np.mean(self.flagged))


def sample_star(profile, resolution, center=None, dim=3):
    """Quadrature sample of the radial graph x = c + rho(u) u over the sphere.

    d=2 uses uniform angles (periodic trapezoid, spectrally accurate); d=3 a
    latitude-longitude grid with midpoint latitudes (no pole samples) and
    sin(latitude)-proportional weights.  Normals and the metric factor come
    from finite differences of rho in the angles.
    """
    if resolution < 8:
        raise SurfaceError("need at least 8 samples per angle")
    if center is None:
        center = np.zeros(dim)
    center = np.asarray(center, dtype=float)
    dim = center.size

    if dim == 2:
        n = int(resolution) ** 2  # match the d=3 sample-count scale
        t = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        omega = np.column_stack([np.cos(t), np.sin(t)])
        omega_p = np.column_stack([-np.sin(t), np.cos(t)])
        dt = 2.0 * np.pi / n
        eps = 1e-6
        rho = np.asarray(profile(omega), dtype=float)
        rp = (np.asarray(profile(_ang2(t + eps)), dtype=float)
              - np.asarray(profile(_ang2(t - eps)), dtype=float)) / (2 * eps)
        pts = center + rho[:, None] * omega
        speed = np.sqrt(rho**2 + rp**2)
        normal = (rho[:, None] * omega - rp[:, None] * omega_p) / speed[:, None]
        w = speed * dt
        return SampledHypersurface(points=pts, euclid_normal=normal, weight=w,
                                   dim=2)

    if dim != 3:
        raise SurfaceError("star sampling implemented for d in {2, 3}")
    nth = int(resolution)
    nph = 2 * int(resolution)
    th = np.pi * (np.arange(nth) + 0.5) / nth
    ph = 2.0 * np.pi * np.arange(nph) / nph
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    th_f = TH.ravel()
    ph_f = PH.ravel()
    omega = _sph(th_f, ph_f)
    rho = np.asarray(profile(omega), dtype=float)

    eps = 1e-6
    r_thp = np.asarray(profile(_sph(th_f + eps, ph_f)), dtype=float)
    r_thm = np.asarray(profile(_sph(th_f - eps, ph_f)), dtype=float)
    r_php = np.asarray(profile(_sph(th_f, ph_f + eps)), dtype=float)
    r_phm = np.asarray(profile(_sph(th_f, ph_f - eps)), dtype=float)
    dr_th = (r_thp - r_thm) / (2 * eps)
    dr_ph = (r_php - r_phm) / (2 * eps)

    e_th = np.column_stack([np.cos(th_f) * np.cos(ph_f),
                            np.cos(th_f) * np.sin(ph_f),
                            -np.sin(th_f)])
    e_ph = np.column_stack([-np.sin(ph_f), np.cos(ph_f), np.zeros_like(ph_f)])
    grad_s = dr_th[:, None] * e_th + (dr_ph / np.sin(th_f))[:, None] * e_ph

    pts = center + rho[:, None] * omega
    m = omega - grad_s / rho[:, None]
    normal = m / np.linalg.norm(m, axis=1, keepdims=True)
    gs2 = np.einsum("ni,ni->n", grad_s, grad_s)
    area_el = rho * np.sqrt(rho**2 + gs2) * np.sin(th_f)
    w = area_el * (np.pi / nth) * (2.0 * np.pi / nph)
    return SampledHypersurface(points=pts, euclid_normal=normal, weight=w, dim=3)


def _ang2(t):
    return np.column_stack([np.cos(t), np.sin(t)])


def _sph(th, ph):
    s = np.sin(th)
    return np.column_stack([s * np.cos(ph), s * np.sin(ph), np.cos(th)])


# ---- anisotropic curvature ---------------------------------------------------


def aniso_curvature(M, integrand, level_fn, grad_floor=1e-10):
    """Fill the anisotropic frame and curvature fields of a sampled surface.

    ``level_fn`` provides the ambient derivatives of an implicit function u
    with M = {u = const} and Du pointing outward.  Works in place and returns
    the surface.
    """
    P = M.points
    N, d = P.shape
    n = d - 1
    Du = level_fn.grad(P)
    D2u = level_fn.hess(P)
    gn = np.linalg.norm(Du, axis=1)
    flagged = ~(gn > grad_floor)
    gsafe = np.where(flagged[:, None], 1.0, gn[:, None])
    nhat = Du / gsafe
    # keep the analytically sampled normal where available, flag disagreement
    if M.euclid_normal is not None:
        dots = np.einsum("ni,ni->n", nhat, M.euclid_normal)
        flagged |= dots < 0.5
        nhat = M.euclid_normal
    M.flagged = flagged

    F_n = integrand.F(nhat)
    nu = integrand.grad_F(nhat)
    gbar = np.linalg.inv(integrand.hess_halfF2(nhat, check=False))

    tangent = _tangent_frames(nhat)
    g = np.einsum("nai,nij,nbj->nab", tangent, gbar, tangent)
    F_Du = integrand.F(Du)
    hmat = np.einsum("nai,nij,nbj->nab", tangent, D2u, tangent) / F_Du[:, None, None]

    kappas, S = _solve_shape(hmat, g)
    H = kappas.sum(axis=1)
    sigma = _elementary_symmetric(kappas)
    tr_s2 = np.einsum("nab,nba->n", S, S)
    traceless = tr_s2 - H**2 / n

    M.aniso_normal = nu
    M.F_n = F_n
    M.tangent = tangent
    M.shape_op = S
    M.kappas = kappas
    M.H = H
    M.sigma = sigma
    M.traceless_sq = traceless
    M.grad_u = Du
    M.hess_u = D2u
    M.integrand = integrand
    return M


def _tangent_frames(nhat):
    """Per-sample orthonormal tangent basis from the least-aligned axes."""
    N, d = nhat.shape
    n = d - 1
    order = np.argsort(np.abs(nhat), axis=1)[:, :n]  # axes most orthogonal to n
    frames = np.empty((N, n, d))
    for a in range(n):
        e = np.zeros((N, d))
        e[np.arange(N), order[:, a]] = 1.0
        v = e - np.einsum("ni,ni->n", e, nhat)[:, None] * nhat
        for b in range(a):
            v -= np.einsum("ni,ni->n", v, frames[:, b])[:, None] * frames[:, b]
        frames[:, a] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return frames


def _solve_shape(h, g):
    """Eigenvalues and matrix of the generalized symmetric pair (h, g)."""
    N, n, _ = h.shape
    S = np.linalg.solve(g, h)
    if n == 1:
        kap = (h[:, 0, 0] / g[:, 0, 0])[:, None]
        return kap, S
    if n == 2:
        # det(h - k g) = 0: quadratic a k^2 - b k + c with the invariants below
        a = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
        b = (h[:, 0, 0] * g[:, 1, 1] + g[:, 0, 0] * h[:, 1, 1]
             - h[:, 0, 1] * g[:, 1, 0] - g[:, 0, 1] * h[:, 1, 0])
        c = h[:, 0, 0] * h[:, 1, 1] - h[:, 0, 1] * h[:, 1, 0]
        disc = np.sqrt(np.maximum(b**2 - 4 * a * c, 0.0))
        k1 = (b - disc) / (2 * a)
        k2 = (b + disc) / (2 * a)
        return np.stack([k1, k2], axis=1), S
    from scipy.linalg import eigh
    kap = np.empty((N, n))
    for i in range(N):
        kap[i] = eigh(h[i], g[i], eigvals_only=True)
    return kap, S


def _elementary_symmetric(kappas):
    N, n = kappas.shape
    e = np.zeros((N, n + 1))
    e[:, 0] = 1.0
    for k in range(n):
        e[:, 1:k + 2] = e[:, 1:k + 2] + kappas[:, k][:, None] * e[:, 0:k + 1]
    return e[:, 1:]


def surface_integral(M, g, measure="euclidean", max_flagged=0.01):
    """Quadrature of a per-sample quantity, Euclidean or anisotropic measure."""
    g = np.asarray(g, dtype=float)
    w = M.weight
    if measure == "anisotropic":
        if M.F_n is None:
            raise SurfaceError("anisotropic measure needs curvature/frame data")
        w = w * M.F_n
    elif measure != "euclidean":
        raise SurfaceError(f"unknown measure {measure!r}")
    if M.flagged is not None and np.any(M.flagged):
        frac = M.flagged_fraction()
        if frac > max_flagged:
            warnings.warn(f"{frac:.1%} of surface samples flagged; "
                          "integral may be unreliable", stacklevel=2)
        keep = ~M.flagged
        return float(np.sum(g[keep] * w[keep]))
    return float(np.sum(g * w))


# ---- level-set extraction -----------------------------------------------------


def extract_level_set(f, t, integrand, grad_floor=None):
    """March the level set {f = t} out of a lattice field and attach geometry.

    ``t`` must lie strictly between min f and 0 (fields here are negative
    inside).  Vertices get quadrature weights from the extracted elements,
    normals from the field gradient, and curvature through the same implicit
    route as analytic surfaces, with the field's node-stencil derivatives
    interpolated to the vertices.
    """
    from .grid import FieldSampler, f_calculus
    dom = f.domain
    fmin = float(np.nanmin(f.values[dom.active]))
    if not (fmin < t < 0.0):
        raise SurfaceError(f"level {t:g} outside (min f, 0) = ({fmin:g}, 0)")
    vals = f.filled(fill=0.0)

    if dom.dim == 3:
        from skimage.measure import marching_cubes
        try:
            verts, faces, _, _ = marching_cubes(vals, level=t)
        except (ValueError, RuntimeError) as exc:
            raise SurfaceError(f"empty or degenerate level set at {t:g}: {exc}")
        pts = dom.lo + verts * dom.h
        weight = np.zeros(len(pts))
        tri = pts[faces]
        cr = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        areas = 0.5 * np.linalg.norm(cr, axis=1)
        for k in range(3):
            np.add.at(weight, faces[:, k], areas / 3.0)
        ncomp = _face_components(len(pts), faces)
    elif dom.dim == 2:
        from skimage.measure import find_contours
        contours = find_contours(vals, level=t)
        if not contours:
            raise SurfaceError(f"empty level set at {t:g}")
        ncomp = len(contours)
        pts_list, w_list = [], []
        for cont in contours:
            closed = np.allclose(cont[0], cont[-1])
            P = cont[:-1] if closed else cont
            X = dom.lo + P * dom.h
            nxt = np.roll(X, -1, axis=0)
            prv = np.roll(X, 1, axis=0)
            seg = 0.5 * (np.linalg.norm(nxt - X, axis=1)
                         + np.linalg.norm(X - prv, axis=1))
            pts_list.append(X)
            w_list.append(seg)
        pts = np.concatenate(pts_list)
        weight = np.concatenate(w_list)
    else:
        raise SurfaceError("level-set extraction implemented for d in {2, 3}")

    if ncomp > 1:
        warnings.warn(f"level set at {t:g} has {ncomp} components", stacklevel=2)

    calc = f_calculus(f, integrand, grad_floor=grad_floor)
    sampler = FieldSampler(f, calc=calc)
    fn = GridFieldFn(sampler)
    Du = fn.grad(pts)
    gn = np.linalg.norm(Du, axis=1)
    ok = gn > (calc.grad_floor if grad_floor is None else grad_floor)
    nhat = np.where(ok[:, None], Du / np.where(ok, gn, 1.0)[:, None], 0.0)

    M = SampledHypersurface(points=pts, euclid_normal=None, weight=weight,
                            dim=dom.dim)
    M.euclid_normal = nhat
    aniso_curvature(M, integrand, fn,
                    grad_floor=(calc.grad_floor if grad_floor is None else grad_floor))
    M.flagged |= ~sampler.cell_valid(pts)
    M.n_components = ncomp
    return M


def _face_components(n_verts, faces):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    adj = coo_matrix((np.ones(len(i)), (i, j)), shape=(n_verts, n_verts))
    ncomp, _ = connected_components(adj, directed=False)
    return int(ncomp)
