"""Elliptic integrands: gauge/support-function pairs and their derivatives.

An integrand couples two positively 1-homogeneous convex functions on R^d:
``F`` (acting on normal directions) and its dual gauge ``F0`` (acting on
points).  The unit level set of ``F0`` is the convex shape whose support
function is ``F``; its dilates by ``r`` are the "spheres" of the anisotropic
geometry.  Everything downstream (anisotropic normals, curvatures, the
torsion equation) is driven by F, its gradient map, and the Hessian of
``0.5*F**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import optimize


class IntegrandError(ValueError):
    """Invalid argument or inconsistent integrand data."""


class EllipticityError(IntegrandError):
    """Convexity of 0.5*F^2 failed at some direction."""


class GaugeSolveError(RuntimeError):
    """The 1-D/spherical solve for the dual gauge did not converge."""


# Central-difference steps: cube root of machine eps for first derivatives,
# fourth root for second derivatives (balances truncation vs. rounding).
_FD_STEP1 = float(np.finfo(float).eps) ** (1.0 / 3.0)
_FD_STEP2 = float(np.finfo(float).eps) ** (1.0 / 4.0)


def quasi_uniform_directions(n, dim):
    """Deterministic, roughly equidistributed unit vectors.

    Uniform angles in the plane, a Fibonacci lattice on the 2-sphere.
    """
    n = int(n)
    if dim == 2:
        t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        return np.column_stack([np.cos(t), np.sin(t)])
    if dim == 3:
        k = np.arange(n, dtype=float)
        golden = (1.0 + np.sqrt(5.0)) / 2.0
        z = 1.0 - (2.0 * k + 1.0) / n
        phi = 2.0 * np.pi * k / golden
        s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    # no lattice construction attempted beyond d=3
    return random_directions(n, dim, seed=0)


def random_directions(n, dim, seed):
    """Seeded unit vectors from a counter-based (Philox) generator."""
    rng = np.random.Generator(np.random.Philox(seed))
    v = rng.standard_normal((int(n), dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _as_batch(v, dim, name):
    a = np.asarray(v, dtype=float)
    if a.shape[-1] != dim:
        raise IntegrandError(f"{name} has trailing dimension {a.shape[-1]}, expected {dim}")
    if not np.all(np.isfinite(a)):
        raise IntegrandError(f"non-finite entries in {name}")
    squeeze = a.ndim == 1
    return np.atleast_2d(a), squeeze


# Perturbation profiles: fixed low-degree polynomials in the direction
# components u = z/|z| (0-homogeneous extensions).  Coefficients:
#   1:  u1^3
#   2:  u1*u2
#   3:  u1^2*u2 - u2*ud^2        (ud = last component)
def perturbation_profile(profile_id, u):
    u = np.asarray(u, dtype=float)
    if profile_id == 1:
        return u[..., 0] ** 3
    if profile_id == 2:
        return u[..., 0] * u[..., 1]
    if profile_id == 3:
        return u[..., 0] ** 2 * u[..., 1] - u[..., 1] * u[..., -1] ** 2
    raise IntegrandError(f"unknown perturbation profile id {profile_id}")


@dataclass
class ValidationReport:
    """Worst-case residuals of the structural identities over a direction sample."""

    kind: str
    dim: int
    n_dirs: int
    tol: float
    homogeneity_max: float
    euler_max: float
    duality_max: float
    matrix_identity_max: float
    gradient_norm_min: float
    gradient_norm_max: float
    eigen_min: float
    mF: float
    MF: float
    ok: bool

    def to_dict(self):
        return asdict(self)


class EllipticIntegrand:
    """A smooth elliptic integrand F on R^d with its dual gauge F0.

    Three kinds are supported:

    * ``euclidean``   -- F(z) = |z|
    * ``ellipsoidal`` -- F(z) = sqrt(z.A.z) for a symmetric positive-definite A
    * ``perturbed``   -- F(z) = sqrt(z.A.z) * (1 + eps * P(z/|z|)) with P a
      fixed polynomial profile (see :func:`perturbation_profile`)

    The first two have closed-form derivatives and dual gauges; the perturbed
    kind uses central finite differences and a spherical maximization for F0.
    Instances are immutable and safe to share across threads.
    """

    def __init__(self, kind, dim, matrix=None, eps=0.0, profile=1,
                 check_ellipticity=True):
        if dim < 2:
            raise IntegrandError("ambient dimension must be >= 2")
        self.kind = str(kind)
        self.dim = int(dim)
        self.eps = float(eps)
        self.profile = int(profile)
        if self.kind == "euclidean":
            self.A = np.eye(self.dim)
        elif self.kind in ("ellipsoidal", "perturbed"):
            A = np.asarray(matrix, dtype=float)
            if A.shape != (self.dim, self.dim):
                raise IntegrandError(f"matrix must be {self.dim}x{self.dim}")
            if not np.allclose(A, A.T, atol=1e-12):
                raise IntegrandError("matrix must be symmetric")
            if np.min(np.linalg.eigvalsh(A)) <= 0:
                raise IntegrandError("matrix must be positive definite")
            self.A = 0.5 * (A + A.T)
        else:
            raise IntegrandError(f"unknown integrand kind {kind!r}")
        self._Ainv = np.linalg.inv(self.A)
        self._mF = None
        self._MF = None
        if self.kind == "perturbed":
            perturbation_profile(self.profile, np.zeros(self.dim))  # id check
            if check_ellipticity:
                self._check_ellipticity_on_sample()

    # ---- constructors ----------------------------------------------------

    @classmethod
    def euclidean(cls, dim):
        return cls("euclidean", dim)

    @classmethod
    def ellipsoidal(cls, matrix):
        A = np.asarray(matrix, dtype=float)
        return cls("ellipsoidal", A.shape[0], matrix=A)

    @classmethod
    def perturbed(cls, matrix, eps, profile=1, check_ellipticity=True):
        A = np.asarray(matrix, dtype=float)
        return cls("perturbed", A.shape[0], matrix=A, eps=eps, profile=profile,
                   check_ellipticity=check_ellipticity)

    def __repr__(self):
        if self.kind == "euclidean":
            return f"EllipticIntegrand(euclidean, d={self.dim})"
        if self.kind == "ellipsoidal":
            return f"EllipticIntegrand(ellipsoidal, d={self.dim}, diag~{np.diag(self.A)})"
        return (f"EllipticIntegrand(perturbed, d={self.dim}, eps={self.eps}, "
                f"profile={self.profile})")

    # ---- primary evaluators ----------------------------------------------

    def F(self, z):
        """Support-function value; 1-homogeneous, positive off the origin."""
        zb, squeeze = _as_batch(z, self.dim, "z")
        quad = np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", zb, self.A, zb), 0.0))
        if self.kind == "perturbed":
            nz = np.linalg.norm(zb, axis=1)
            u = np.divide(zb, nz[:, None], out=np.zeros_like(zb), where=nz[:, None] > 0)
            quad = quad * (1.0 + self.eps * perturbation_profile(self.profile, u))
        return quad[0] if squeeze else quad.reshape(np.shape(z)[:-1])

    def F0(self, x):
        """Dual gauge; its unit level set is the Wulff shape of F."""
        xb, squeeze = _as_batch(x, self.dim, "x")
        if self.kind in ("euclidean", "ellipsoidal"):
            val = np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", xb, self._Ainv, xb), 0.0))
        else:
            val = np.array([self._polar_max(xi) for xi in xb])
        return val[0] if squeeze else val.reshape(np.shape(x)[:-1])

    def grad_F(self, z):
        """Gradient of F (0-homogeneous); restricted to the sphere this is
        the map sending Euclidean normals to anisotropic normals."""
        zb, squeeze = _as_batch(z, self.dim, "z")
        self._reject_origin(zb, "grad_F")
        if self.kind in ("euclidean", "ellipsoidal"):
            Az = zb @ self.A.T
            g = Az / np.sqrt(np.einsum("ni,ij,nj->n", zb, self.A, zb))[:, None]
        else:
            g = self._fd_grad(self.F, zb)
        return g[0] if squeeze else g.reshape(np.shape(z))

    def hess_halfF2(self, z, check=True):
        """Hessian of 0.5*F^2; symmetric positive definite off the origin."""
        zb, squeeze = _as_batch(z, self.dim, "z")
        self._reject_origin(zb, "hess_halfF2")
        if self.kind in ("euclidean", "ellipsoidal"):
            H = np.broadcast_to(self.A, (len(zb), self.dim, self.dim)).copy()
        else:
            H = self._fd_hess(lambda v: 0.5 * self.F(v) ** 2, zb)
            H = 0.5 * (H + np.swapaxes(H, -1, -2))
            if check:
                ev = np.linalg.eigvalsh(H)
                bad = np.nonzero(ev[:, 0] <= 0)[0]
                if bad.size:
                    zb_bad = zb[bad[0]]
                    raise EllipticityError(
                        f"0.5*F^2 is not convex at z={zb_bad.tolist()} "
                        f"(min eigenvalue {ev[bad[0], 0]:.3e})")
        if squeeze:
            return H[0]
        return H.reshape(np.shape(z)[:-1] + (self.dim, self.dim))

    def grad_F0(self, x):
        """Gradient of the dual gauge (analytic when available, else FD)."""
        xb, squeeze = _as_batch(x, self.dim, "x")
        self._reject_origin(xb, "grad_F0")
        if self.kind in ("euclidean", "ellipsoidal"):
            Ax = xb @ self._Ainv.T
            g = Ax / np.sqrt(np.einsum("ni,ij,nj->n", xb, self._Ainv, xb))[:, None]
        else:
            g = self._fd_grad(self.F0, xb)
        return g[0] if squeeze else g.reshape(np.shape(x))

    def gbar(self, z):
        """Ambient anisotropic metric at the anisotropic normal grad_F(z).

        The Hessian of the dual quadratic form q = 0.5*F0^2 evaluated at
        grad_F(z) equals the inverse of hess_halfF2(z), so the metric is
        obtained by one matrix inversion and never differentiates F0.  The
        argument is the pre-image ``z`` (any positive multiple works).
        """
        H = self.hess_halfF2(z)
        return np.linalg.inv(H)

    def wulff_radial(self, dirs):
        """Radius function of the unit Wulff shape: rho(u) = 1/F0(u)."""
        return 1.0 / self.F0(dirs)

    # ---- cached extremes ---------------------------------------------------

    @property
    def mF(self):
        if self._mF is None:
            self._compute_extremes()
        return self._mF

    @property
    def MF(self):
        if self._MF is None:
            self._compute_extremes()
        return self._MF

    def _compute_extremes(self, n=None):
        if n is None:
            n = 4096 if self.dim == 2 else 20000
        dirs = quasi_uniform_directions(n, self.dim)
        vals = self.F(dirs)
        zmin = dirs[int(np.argmin(vals))]
        zmax = dirs[int(np.argmax(vals))]
        self._mF = self._extremize_on_sphere(zmin, sign=+1.0)
        self._MF = self._extremize_on_sphere(zmax, sign=-1.0)

    def _extremize_on_sphere(self, z0, sign):
        # local polish of min (sign=+1) or max (sign=-1) of F over |z|=1
        B = _tangent_basis(z0)

        def fun(w):
            zr = z0 + B @ w
            nz = np.linalg.norm(zr)
            zu = zr / nz
            val = sign * self.F(zu)
            g = sign * self.grad_F(zu)
            gt = (B.T @ (g - (g @ zu) * zu)) / nz
            return val, gt

        res = optimize.minimize(fun, np.zeros(self.dim - 1), jac=True,
                                method="BFGS", options={"gtol": 1e-12, "maxiter": 200})
        return float(sign * res.fun)

    # ---- perturbed-kind internals ------------------------------------------

    def _check_ellipticity_on_sample(self, n=512):
        dirs = quasi_uniform_directions(n, self.dim)
        self.hess_halfF2(dirs, check=True)

    def _fd_grad(self, fun, zb):
        h = _FD_STEP1 * np.maximum(np.linalg.norm(zb, axis=1), 1.0)
        g = np.empty_like(zb)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            g[:, i] = (fun(zb + h[:, None] * e) - fun(zb - h[:, None] * e)) / (2.0 * h)
        return g

    def _fd_hess(self, fun, zb):
        d = self.dim
        h = _FD_STEP2 * np.maximum(np.linalg.norm(zb, axis=1), 1.0)
        H = np.empty((len(zb), d, d))
        f0 = fun(zb)
        eye = np.eye(d)
        for i in range(d):
            ei = h[:, None] * eye[i]
            H[:, i, i] = (fun(zb + ei) - 2.0 * f0 + fun(zb - ei)) / h**2
            for j in range(i + 1, d):
                ej = h[:, None] * eye[j]
                H[:, i, j] = (fun(zb + ei + ej) - fun(zb + ei - ej)
                              - fun(zb - ei + ej) + fun(zb - ei - ej)) / (4.0 * h**2)
                H[:, j, i] = H[:, i, j]
        return H

    def _polar_max(self, x):
        # F0(x) = max over unit z of <x,z>/F(z); coarse scan then chart ascent
        nx = np.linalg.norm(x)
        if nx == 0.0:
            return 0.0
        dirs = self._polar_scan_dirs()
        vals = (dirs @ x) / self.F(dirs)
        z0 = dirs[int(np.argmax(vals))]
        B = _tangent_basis(z0)

        def negval(w):
            zr = z0 + B @ w
            nz = np.linalg.norm(zr)
            zu = zr / nz
            Fz = self.F(zu)
            val = (x @ zu) / Fz
            gz = x / Fz - (val / Fz) * self.grad_F(zu)
            return -val, -(B.T @ gz) / nz

        res = optimize.minimize(negval, np.zeros(self.dim - 1), jac=True,
                                method="BFGS", options={"gtol": 1e-13 * nx, "maxiter": 200})
        gnorm = float(np.linalg.norm(res.jac))
        if not np.isfinite(res.fun) or gnorm > 1e-6 * max(nx, 1.0):
            raise GaugeSolveError(
                f"dual gauge ascent stalled at x={np.asarray(x).tolist()} "
                f"(residual gradient {gnorm:.3e})")
        return float(-res.fun)

    def _polar_scan_dirs(self):
        if not hasattr(self, "_scan_dirs"):
            n = 1024 if self.dim == 2 else 2048
            self._scan_dirs = quasi_uniform_directions(n, self.dim)
        return self._scan_dirs

    @staticmethod
    def _reject_origin(zb, opname):
        nz = np.linalg.norm(zb, axis=1)
        if np.any(nz == 0.0):
            raise IntegrandError(f"{opname} undefined at the origin")

    # ---- validation ----------------------------------------------------------

    def validate(self, n_dirs=100, seed=0, tol=None):
        """Check the structural identities on a direction sample.

        Residuals measured: positive 1-homogeneity, the Euler identity
        <grad_F(z), z> = F(z), the gauge duality grad_F0(grad_F(z)) = z/F(z),
        the product of the dual quadratic-form Hessians with hess_halfF2
        against the identity matrix, positivity of the smallest eigenvalue of
        hess_halfF2, and the sphere extremes (mF, MF) bracketing |grad_F|.
        """
        if n_dirs < 10:
            raise IntegrandError("n_dirs must be >= 10")
        if tol is None:
            tol = 1e-7 if self.kind in ("euclidean", "ellipsoidal") else 1e-4
        dirs = random_directions(n_dirs, self.dim, seed)
        Fv = self.F(dirs)

        hom = 0.0
        for lam in (0.5, 2.0, 10.0):
            hom = max(hom, float(np.max(np.abs(self.F(lam * dirs) - lam * Fv) / (lam * Fv))))

        g = self.grad_F(dirs)
        euler = float(np.max(np.abs(np.einsum("ni,ni->n", g, dirs) - Fv) / Fv))

        dual = self.grad_F0(g) - dirs / Fv[:, None]
        duality = float(np.max(np.linalg.norm(dual, axis=1)))

        H = self.hess_halfF2(dirs, check=False)
        Hq = self._hess_q_independent(g)
        prod = np.einsum("nij,njk->nik", Hq, H)
        eye = np.eye(self.dim)
        matrix_identity = float(np.max(np.abs(prod - eye)))

        ev = np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2)))
        eig_min = float(np.min(ev[:, 0]))

        gn = np.linalg.norm(g, axis=1)
        report = ValidationReport(
            kind=self.kind, dim=self.dim, n_dirs=int(n_dirs), tol=float(tol),
            homogeneity_max=hom, euler_max=euler, duality_max=duality,
            matrix_identity_max=matrix_identity,
            gradient_norm_min=float(np.min(gn)), gradient_norm_max=float(np.max(gn)),
            eigen_min=eig_min, mF=float(self.mF), MF=float(self.MF),
            ok=bool(max(hom, euler, duality, matrix_identity) <= tol
                    and eig_min > 0.0
                    and np.min(gn) >= self.mF - tol
                    and np.max(gn) <= self.MF + tol),
        )
        return report

    def _hess_q_independent(self, x):
        """Hessian of q = 0.5*F0^2 by a route independent of hess_halfF2."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind in ("euclidean", "ellipsoidal"):
            return np.broadcast_to(self._Ainv, (len(xb), self.dim, self.dim)).copy()
        return self._fd_hess(lambda v: 0.5 * self.F0(v) ** 2, xb)


def _tangent_basis(z):
    """Orthonormal completion of the unit vector z (columns span z-perp)."""
    d = len(z)
    M = np.eye(d) - np.outer(z, z)
    q, r = np.linalg.qr(M)
    cols = np.argsort(np.abs(np.diag(r)))[::-1][: d - 1]
    return q[:, sorted(cols)]
