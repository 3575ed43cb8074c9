"""Deficits, integral identities, Wulff-sphere fitting, and stability runs.

Everything here consumes a solved torsion potential and/or a curvature-filled
boundary surface and produces scalar diagnostics: the inverse-mean-curvature
deficit, the constant-mean-curvature and constant-Neumann deficits, the
residuals of the exact integral identities they satisfy, a best-fit Wulff
sphere with Hausdorff distance, and the level-band slice selection that turns
a small traceless Hessian into a small traceless shape operator on one slice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dataclass_field, asdict

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree

from .grid import f_calculus, FieldSampler
from .surface import (SampledHypersurface, sample_star, WulffProfile,
                      surface_integral, extract_level_set, SurfaceError)
from .torsion import boundary_trace, one_sided_neighborhood


class AnalysisError(RuntimeError):
    pass


class MeanConvexityError(AnalysisError):
    """The inverse-curvature deficit needs H > 0 everywhere."""


@dataclass
class WulffSphere:
    """A dilated, translated Wulff shape {F0(x - center) = r}."""

    center: np.ndarray
    r: float
    integrand: object

    def gauge(self, points):
        return self.integrand.F0(np.atleast_2d(points) - self.center)

    def sample(self, resolution):
        prof = WulffProfile(self.integrand, self.r)
        return sample_star(prof, resolution, center=self.center,
                           dim=self.integrand.dim)

    def to_dict(self):
        return {"center": np.asarray(self.center).tolist(), "r": float(self.r)}


# ---- basic geometric quantities ---------------------------------------------


def surface_volume(M, origin=None):
    """Enclosed volume from the divergence theorem on the position field."""
    if origin is None:
        origin = np.zeros(M.points.shape[1])
    xn = np.einsum("ni,ni->n", M.points - origin, M.euclid_normal)
    return surface_integral(M, xn) / M.points.shape[1]


def frak_h(M, volume):
    """Reference anisotropic mean curvature n/(n+1) * mu(M)/|Omega|."""
    mu = M.area("anisotropic")
    n = M.n
    return n / (n + 1) * mu / volume


def minkowski_residual(M):
    """Relative residual of n mu(M) = integral of H <x, n~> dmu~."""
    n = M.n
    mu = M.area("anisotropic")
    xn = np.einsum("ni,ni->n", M.points, M.euclid_normal)
    rhs = surface_integral(M, M.H * xn)
    return abs(n * mu - rhs) / abs(n * mu)


def hk_deficit(M, volume):
    """Inverse-curvature deficit: integral of 1/H dmu - (n+1)/n |Omega|.

    Nonnegative for mean-convex surfaces, zero exactly on Wulff spheres.
    """
    keep = ~M.flagged if M.flagged is not None else np.ones(M.n_samples, bool)
    bad = M.H[keep] <= 0
    if np.any(bad):
        raise MeanConvexityError(
            f"H <= 0 at {np.mean(bad):.2%} of samples; deficit undefined")
    n = M.n
    return surface_integral(M, 1.0 / M.H, measure="anisotropic") \
        - (n + 1) / n * volume


# ---- torsion-coupled identities ----------------------------------------------


def _attach_trace(sol, M):
    """F(Df) and the gradient itself on the surface samples."""
    if getattr(M, "_trace", None) is None:
        M._trace = boundary_trace(sol, points=M.points, normals=M.euclid_normal)
    return M._trace


def traceless_hessian_integral(sol, power=2.0, mask=None, weight=None):
    """Integral over the body of |traceless F-Hessian|^power, optionally
    against a node-wise weight.

    Within a three-cell collar of the boundary the second-derivative stencils
    amplify the non-smooth part of the solution error, so collar values are
    replaced by the interior field sampled along the inward normal; the
    quadrature stays first-order accurate there and the amplified noise
    (which would not vanish under refinement) is avoided.  Flagged critical
    nodes are excluded.
    """
    calc = _calc(sol)
    t2 = _t2_lattice(sol)
    sel = calc.valid if mask is None else (calc.valid & mask)
    dom = sol.domain
    w = dom.volume_weights()
    vals = t2[sel] ** (power / 2.0) * w[sel]
    if weight is not None:
        vals = vals * np.asarray(weight)[sel]
    return float(np.sum(vals))


_COLLAR_DEPTH = 3.0  # cells


def _t2_lattice(sol):
    """Squared traceless F-Hessian with collar values pulled from the core."""
    if getattr(sol, "_t2_used", None) is not None:
        return sol._t2_used
    dom = sol.domain
    calc = _calc(sol)
    t2 = np.where(calc.valid, np.maximum(calc.traceless_sq, 0.0), 0.0)
    depth_cut = _COLLAR_DEPTH * dom.h
    P = dom.active_points()
    depth = -dom.level_value(P)
    collar = depth < depth_cut
    if np.any(collar):
        from .grid import multilinear_sample
        pc = P[collar]
        nrm = dom._level_gradient(pc)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        # linear extrapolation from two clean depths back to the node
        s1 = depth_cut + dom.h
        s2 = depth_cut + 3.0 * dom.h
        v1 = multilinear_sample(t2, dom.lo, dom.h,
                                pc - (s1 - depth[collar])[:, None] * nrm, fill=0.0)
        v2 = multilinear_sample(t2, dom.lo, dom.h,
                                pc - (s2 - depth[collar])[:, None] * nrm, fill=0.0)
        slope = (v1 - v2) / (s2 - s1)
        vals = np.maximum(v1 + slope * (s1 - depth[collar]), 0.0)
        out = t2.copy()
        sub = out[dom.active]
        sub[collar] = vals
        out[dom.active] = sub
    else:
        out = t2
    sol._t2_used = out
    return out


def _calc(sol):
    if getattr(sol, "_calc", None) is None:
        sol._calc = f_calculus(sol.f, sol.integrand)
    return sol._calc


def reilly_residual(sol, M, volume):
    """Residual of: integral |tr-free F-Hessian|^2 dx
    = n/(n+1) |Omega| - integral H F^2(Df) dmu, normalized by |Omega|."""
    n = M.n
    tr = _attach_trace(sol, M)
    lhs = traceless_hessian_integral(sol)
    rhs = n / (n + 1) * volume - surface_integral(
        M, M.H * tr["F_of_grad"] ** 2, measure="anisotropic")
    return {"lhs": lhs, "rhs": rhs, "residual": abs(lhs - rhs) / volume}


def omega_residual(sol, M, volume):
    """Relative residual of |Omega| = integral F(Df) dmu."""
    tr = _attach_trace(sol, M)
    flux = surface_integral(M, tr["F_of_grad"], measure="anisotropic")
    return abs(volume - flux) / volume


def alexandrov_deficit(sol, M, volume):
    """L1 mean-curvature deficit and the residual of its integral identity.

    The identity:  integral |tr-free F-Hessian|^2 dx
      + n/(n+1) (1/R1~) integral (F(Df) - R1~)^2 dmu
      = integral (frakH - H) F^2(Df) dmu,
    with R1~ = n/((n+1) frakH).  Like its parent identity (see
    reilly_residual) the residual is normalized by the body volume; the
    term-relative value is reported as ``residual_strict``.  The L1 deficit
    ||H - frakH|| comes in both the Euclidean and the anisotropic measure.
    """
    n = M.n
    fr = frak_h(M, volume)
    r1t = n / ((n + 1) * fr)
    tr = _attach_trace(sol, M)
    F_df = tr["F_of_grad"]
    lhs = (traceless_hessian_integral(sol)
           + n / (n + 1) / r1t * surface_integral(
               M, (F_df - r1t) ** 2, measure="anisotropic"))
    rhs = surface_integral(M, (fr - M.H) * F_df ** 2, measure="anisotropic")
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {
        "deficit_l1": surface_integral(M, np.abs(M.H - fr)),
        "deficit_l1_aniso": surface_integral(M, np.abs(M.H - fr),
                                             measure="anisotropic"),
        "frakH": fr,
        "R1": n / fr,
        "R1_tilde": r1t,
        "lhs": lhs,
        "rhs": rhs,
        "residual": abs(lhs - rhs) / volume,
        "residual_strict": abs(lhs - rhs) / scale,
    }


def p_function(sol, flux_fractions=(0.3, 0.5, 0.7)):
    """The field F^2(Df)/2 - f/(n+1) and residuals of its divergence law.

    The law: div of the anisotropic gradient of P equals the squared
    traceless F-Hessian.  Two residuals are reported.  The headline
    ``residual`` integrates the law over sublevel bodies {f < t}: the flux of
    the anisotropic P-gradient through the slice {f = t} against the volume
    integral of the right-hand side, at several depth fractions (this form
    converges cleanly; first differences of data only).  The ``pointwise``
    entry is the L1 mismatch of the node-wise divergence against the
    right-hand side over the deep interior; it carries the third-difference
    noise floor of the solved field and is reported for reference.
    """
    dom = sol.domain
    d = dom.dim
    calc = _calc(sol)
    P = np.full(dom.shape, np.nan)
    ok = calc.valid
    P[ok] = 0.5 * calc.F_of_grad[ok] ** 2 - sol.f.values[ok] / d

    from .grid import ScalarField, multilinear_sample, _one_sided_axis_derivative, _shift_bool
    Pf = ScalarField(dom, P)
    gradP = Pf.gradient()
    gP = np.full(dom.shape + (d,), np.nan)
    B = sol.integrand.hess_halfF2(calc.grad[ok], check=False)
    gP[ok] = np.einsum("nij,nj->ni", B, gradP[ok])

    # flux form over sublevel bodies
    t2 = np.where(ok, np.maximum(calc.traceless_sq, 0.0), 0.0)
    w = dom.volume_weights()
    fmin = float(np.nanmin(sol.f.values[dom.active]))
    flux_resids = []
    for frac in flux_fractions:
        t = frac * fmin
        try:
            Ms = extract_level_set(sol.f, t, sol.integrand)
        except SurfaceError:
            continue
        Vq = np.stack([multilinear_sample(gP[..., ax], dom.lo, dom.h, Ms.points)
                       for ax in range(d)], axis=-1)
        flux = surface_integral(Ms, np.einsum("ni,ni->n", Vq, Ms.euclid_normal))
        sub = dom.active & (sol.f.values < t)
        rhs = float(np.sum(t2[sub] * w[sub]))
        if rhs > 0:
            flux_resids.append(abs(flux - rhs) / rhs)
    residual = max(flux_resids) if flux_resids else np.nan

    # pointwise form on the deep interior
    div = np.full(dom.shape, np.nan)
    acc = np.zeros(dom.shape)
    for ax in range(d):
        acc += _one_sided_axis_derivative(dom, gP[..., ax], ax)
    div[dom.active] = acc[dom.active]
    inner = dom.interior & ok & np.isfinite(div)
    for ax in range(d):
        inner &= _shift_bool(dom.interior, ax, +1) & _shift_bool(dom.interior, ax, -1)
    num = float(np.sum(np.abs(div[inner] - t2[inner]) * w[inner]))
    den = max(float(np.sum(t2[inner] * w[inner])), 1e-300)
    return {"P": Pf, "residual": residual, "pointwise": num / den,
            "flux_residuals": flux_resids}


def pohozaev_residual(sol, M):
    """Residuals of the two volume identities of the P-function.

    (a) integral P dx = 1/(2(n+1)) integral F^2(Df) <x, n~> dmu~, for the
    body translated so the star center is the origin; (b) the companion
    0 = integral F^2(Df) dx + integral f dx.
    """
    dom = sol.domain
    d = dom.dim
    calc = _calc(sol)
    ok = calc.valid
    w = dom.volume_weights()
    P = 0.5 * calc.F_of_grad[ok] ** 2 - sol.f.values[ok] / d
    intP = float(np.sum(P * w[ok]))

    tr = _attach_trace(sol, M)
    xn = np.einsum("ni,ni->n", M.points - dom.center, M.euclid_normal)
    rhs = surface_integral(M, tr["F_of_grad"] ** 2 * xn) / (2.0 * d)

    intF2 = float(np.sum(calc.F_of_grad[ok] ** 2 * w[ok]))
    intf = float(np.sum(sol.f.values[dom.active] * w[dom.active]))
    return {
        "lhs": intP,
        "rhs": rhs,
        "residual": abs(intP - rhs) / abs(intP),
        "companion_residual": abs(intF2 + intf) / abs(intF2),
    }


def serrin_deficit(sol, M, volume):
    """Constant-Neumann deficit and the overdetained-problem identity residual.

    R is the natural constant |Omega|/mu(M).  The identity:
    integral (-f) |tr-free F-Hessian|^2 dx = 1/2 integral (F^2(Df) - R^2)
    <aniso-grad f - aniso-grad l, n~> dmu~, with l = F0(x)^2 / (2(n+1))
    centered at the star center.
    """
    dom = sol.domain
    d = dom.dim
    mu = M.area("anisotropic")
    R = volume / mu
    tr = _attach_trace(sol, M)
    F_df = tr["F_of_grad"]

    lhs = traceless_hessian_integral(sol, weight=-sol.f.values)

    # boundary gradients: aniso-grad f = F(Df) grad_F(Df) with Df || n~ on M,
    # so grad_F(Df) = grad_F(n~); aniso-grad l = (x - c)/(n+1)
    I = sol.integrand
    nuM = I.grad_F(M.euclid_normal)
    gradFf = F_df[:, None] * nuM
    gradFl = (M.points - dom.center) / d
    dot = np.einsum("ni,ni->n", gradFf - gradFl, M.euclid_normal)
    rhs = 0.5 * surface_integral(M, (F_df ** 2 - R ** 2) * dot)
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {
        "deficit_l1": surface_integral(M, np.abs(F_df - R)),
        "deficit_l1_aniso": surface_integral(M, np.abs(F_df - R),
                                             measure="anisotropic"),
        "R": R,
        "lhs": lhs,
        "rhs": rhs,
        "residual": abs(lhs - rhs) / scale,
    }


def hk_chain_margin(sol, M, volume):
    """Slack of: integral |tr-free F-Hessian|^2 dx
    <= (n/(n+1))^2 * hk-deficit.  Nonnegative up to quadrature error."""
    n = M.n
    lhs = traceless_hessian_integral(sol)
    rhs = (n / (n + 1)) ** 2 * hk_deficit(M, volume)
    return rhs - lhs


# ---- Wulff fitting and Hausdorff distance -------------------------------------


def hausdorff_distance(P, Q):
    """Symmetric Hausdorff distance between two point clouds."""
    tp = cKDTree(P)
    tq = cKDTree(Q)
    d_pq = np.max(tq.query(P)[0])
    d_qp = np.max(tp.query(Q)[0])
    return float(max(d_pq, d_qp))


def radial_gauge_distance(points, sphere):
    """Sup distance from sample points to a Wulff sphere, measured along rays
    from its center.  For surfaces star-shaped about the center this bounds
    the set Hausdorff distance from above and is free of the tangential gaps
    a cloud-to-cloud comparison would see."""
    rel = np.atleast_2d(points) - sphere.center
    R = np.linalg.norm(rel, axis=1)
    rho_w = sphere.r / sphere.integrand.F0(rel / R[:, None])
    return float(np.max(np.abs(R - rho_w)))


def fit_wulff(M, integrand, seed=0, dense_factor=4, restarts=2):
    """Best-fit Wulff sphere by direct search over the center.

    The center minimizes the sup-deviation of the gauge values from their
    median (the radius estimate); Nelder-Mead with seeded jittered restarts.
    Returns (WulffSphere, distance, info).  The distance is the radial
    sup-distance of the samples to the fitted sphere; the symmetric
    cloud-to-cloud Hausdorff distance against a dense sample (together with
    its sampling-gap estimate, which lower-bounds what that comparison can
    resolve) is recorded in the info dict.
    """
    pts = M.points
    keep = ~M.flagged if M.flagged is not None else slice(None)
    pts = pts[keep]
    w = M.weight[keep]
    y0 = np.sum(pts * w[:, None], axis=0) / np.sum(w)

    def objective(y):
        g = integrand.F0(pts - y)
        return float(np.max(np.abs(g - np.median(g))))

    scale = float(np.max(np.linalg.norm(pts - y0, axis=1)))
    rng = np.random.Generator(np.random.Philox(seed))
    best = None
    stagnated = True
    for k in range(restarts + 1):
        start = y0 if k == 0 else y0 + 0.05 * scale * rng.standard_normal(len(y0))
        res = optimize.minimize(objective, start, method="Nelder-Mead",
                                options={"xatol": 1e-10 * scale,
                                         "fatol": 1e-12 * scale,
                                         "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
        if res.success:
            stagnated = False
    y = best.x
    r = float(np.median(integrand.F0(pts - y)))
    sphere = WulffSphere(center=y, r=r, integrand=integrand)

    dist = radial_gauge_distance(pts, sphere)
    res_guess = int(np.ceil(np.sqrt(M.n_samples / 2.0))) if M.dim == 3 \
        else int(np.ceil(np.sqrt(M.n_samples)))
    dense = sphere.sample(dense_factor * max(res_guess, 8))
    cloud = hausdorff_distance(pts, dense.points)
    gap = float(np.max(cKDTree(dense.points).query(dense.points, k=2)[0][:, 1]))
    return sphere, dist, {"fit_sup": float(best.fun), "stagnated": stagnated,
                          "cloud_hausdorff": cloud, "sampling_gap": gap}


# ---- slice selection ------------------------------------------------------------


@dataclass
class GoodSliceReport:
    """Outcome of the level-band slice scan."""

    s: float                    # chosen level (in |f| units)
    t0: float                   # coarea budget level
    T1_proxy: float             # min(min |Df|, depth) without the constant
    lambda_s: float             # rescale factor of the chosen slice
    norm_S_ring: float          # ||tr-free S||_{p, M_s}, original frame
    norm_S_ring_hat: float      # same, rescaled to unit anisotropic area
    bound_hat: float            # guarantee right-hand side, rescaled frame
    slack: float                # norm_hat / bound_hat (<= 1 + tolerance)
    norm_hess: float            # ||tr-free F-Hessian||_{p, U}
    min_grad_U: float
    depth_U: float
    p: float
    levels: np.ndarray = dataclass_field(repr=False, default=None)
    norms: np.ndarray = dataclass_field(repr=False, default=None)
    areas: np.ndarray = dataclass_field(repr=False, default=None)
    area_rate_ok: bool = True
    slice_surface: object = dataclass_field(repr=False, default=None)

    def to_dict(self):
        scalar_keys = ("s", "t0", "T1_proxy", "lambda_s", "norm_S_ring",
                       "norm_S_ring_hat", "bound_hat", "slack", "norm_hess",
                       "min_grad_U", "depth_U", "p")
        out = {k: float(getattr(self, k)) for k in scalar_keys}
        out["area_rate_ok"] = bool(self.area_rate_ok)
        for k in ("levels", "norms", "areas"):
            v = getattr(self, k)
            out[k] = None if v is None else np.asarray(v).tolist()
        return out


def lp_surface_norm(M, values, p, measure="euclidean"):
    return surface_integral(M, np.abs(values) ** p, measure=measure) ** (1.0 / p)


def good_slice(sol, mu_M, p=None, U=None, n_slices=12, min_level_h=2.0):
    """Scan level bands for the slice with the smallest traceless shape norm.

    Works in the frame rescaled to unit anisotropic boundary area (where the
    coarea budget level t0 is defined), scans levels below min(t0, band
    depth), and verifies the selected slice satisfies the guarantee
      ||tr-free S||_p <= min(min|Df|, depth)^(-p/(p+1)) ||tr-free Hess||^(p/(p+1))
    in that frame.  Reports the per-slice anisotropic areas and checks their
    finite-difference growth rate against the curvature bound.
    """
    dom = sol.domain
    d = dom.dim
    n = d - 1
    I = sol.integrand
    if p is None:
        p = float(d)
    if U is None:
        U = one_sided_neighborhood(sol)

    calc = _calc(sol)
    lam = mu_M ** (-1.0 / n)

    norm_hess = traceless_hessian_integral(sol, power=p, mask=U.mask) ** (1.0 / p)
    min_grad = U.min_grad
    depth = U.depth

    norm_hess_hat = lam ** ((n + 1) / p - 1.0) * norm_hess
    depth_hat = lam * depth
    t0_hat = (2.0 / I.mF ** p) * min(min_grad, depth_hat) ** (1.0 / (p + 1)) \
        * norm_hess_hat ** (p / (p + 1))
    t0 = t0_hat / lam

    t_hi = min(t0, depth)
    t_lo = min_level_h * dom.h * max(min_grad, 1e-12)
    if t_hi <= t_lo:
        t_lo = 0.25 * t_hi
    levels = np.linspace(t_lo, t_hi, n_slices)

    norms = np.full(n_slices, np.nan)
    areas = np.full(n_slices, np.nan)
    slices = {}
    for k, t in enumerate(levels):
        try:
            Ms = extract_level_set(sol.f, -t, I)
        except SurfaceError:
            continue
        ring = np.sqrt(np.maximum(Ms.traceless_sq, 0.0))
        norms[k] = lp_surface_norm(Ms, ring, p)
        areas[k] = Ms.area("anisotropic")
        slices[k] = Ms
    if not slices:
        raise AnalysisError("no extractable slices in the level band")

    k_best = int(np.nanargmin(norms))
    s = float(levels[k_best])
    Ms = slices[k_best]

    # dilation that would give the slice the Euclidean area of the unit shape
    lam_s = float((sample_area_of_unit_wulff(I) / Ms.area("euclidean"))
                  ** (1.0 / n))
    norm_hat = lam ** (n / p - 1.0) * norms[k_best]
    bound_hat = min(min_grad, depth_hat) ** (-p / (p + 1)) \
        * norm_hess_hat ** (p / (p + 1))
    slack = norm_hat / bound_hat if bound_hat > 0 else np.inf

    # area growth against the curvature bound, adjacent-slice differences
    ok_rate = True
    vals = np.array([(levels[k], areas[k],
                      lp_surface_norm(slices[k],
                                      np.sqrt(np.einsum("nab,nba->n",
                                                        slices[k].shape_op,
                                                        slices[k].shape_op)), p),
                      slices[k].area("euclidean"))
                     for k in sorted(slices)])
    if len(vals) >= 2:
        t_v, a_v, sn_v, ae_v = vals.T
        rate = np.abs(np.diff(a_v) / np.diff(t_v))
        bound = (np.sqrt(n) / min_grad
                 * 0.5 * (ae_v[1:] ** ((p - 1) / p) * sn_v[1:]
                          + ae_v[:-1] ** ((p - 1) / p) * sn_v[:-1]))
        ok_rate = bool(np.all(rate <= 2.0 * bound + 1e-12))

    return GoodSliceReport(
        s=s, t0=t0, T1_proxy=min(min_grad, depth), lambda_s=lam_s,
        norm_S_ring=float(norms[k_best]), norm_S_ring_hat=float(norm_hat),
        bound_hat=float(bound_hat), slack=float(slack),
        norm_hess=float(norm_hess), min_grad_U=float(min_grad),
        depth_U=float(depth), p=float(p), levels=levels, norms=norms,
        areas=areas, area_rate_ok=ok_rate, slice_surface=Ms)


def thm11_quantity(sol, mu_M, p=None, U=None):
    """The distance-bound bookkeeping combination of the level-set theorem.

    Q = ||tr-free F-Hessian||_{p,U}^{p/(p+1)}
        * mu(M)^{(3p-n)/(n(p+1))}
        / min(mu(M)^{1/n} min_U |Df|, max_U |f|)^{p/(p+1)}

    Under x -> lam x, f -> lam f the quantity scales like a length (degree
    one), matching the distance it bounds; the scale test verifies exactly
    that degree.
    """
    dom = sol.domain
    n = dom.dim - 1
    if p is None:
        p = float(dom.dim)
    if U is None:
        U = one_sided_neighborhood(sol)
    norm_hess = traceless_hessian_integral(sol, power=p, mask=U.mask) ** (1.0 / p)
    denom = min(mu_M ** (1.0 / n) * U.min_grad, U.depth)
    return (norm_hess ** (p / (p + 1))
            * mu_M ** ((3 * p - n) / (n * (p + 1)))
            / denom ** (p / (p + 1)))


def sample_area_of_unit_wulff(integrand, resolution=48):
    key = "_unit_area"
    if not hasattr(integrand, key):
        W = sample_star(WulffProfile(integrand, 1.0), resolution,
                        dim=integrand.dim)
        setattr(integrand, key, W.area("euclidean"))
    return getattr(integrand, key)


def pinching_check(Ms, tol_rel=1e-9):
    """Pointwise check of F^2(Df) |tr-free S|^2 <= |tr-free F-Hessian|^2 on a
    slice extracted from a field.  Returns (fraction satisfied, max relative
    violation); both sides are assembled from the same point derivatives."""
    if Ms.grad_u is None or Ms.hess_u is None:
        raise AnalysisError("slice carries no field derivatives")
    I = Ms.integrand
    keep = ~Ms.flagged
    Du = Ms.grad_u[keep]
    D2u = Ms.hess_u[keep]
    B = I.hess_halfF2(Du, check=False)
    bf = np.einsum("nij,njk->nik", B, D2u)
    lap = np.einsum("nii->n", bf)
    t2 = np.einsum("nij,nji->n", bf, bf) - lap ** 2 / (Ms.dim)
    lhs = I.F(Du) ** 2 * np.maximum(Ms.traceless_sq[keep], 0.0)
    scale = np.maximum(np.abs(t2), 1e-300)
    viol = (lhs - t2) / scale
    frac_ok = float(np.mean(viol <= tol_rel))
    return frac_ok, float(np.max(viol))


# ---- the aggregated report -------------------------------------------------------


@dataclass
class DeficitReport:
    """All deficits, residuals, and fit data for one (domain, integrand) case."""

    eps: float
    h: float
    volume_grid: float
    volume_surface: float
    mu: float
    mu_tilde: float
    frakH: float
    R1: float
    R1_tilde: float
    hk_deficit: float
    hk_chain_margin: float
    alexandrov_deficit: float
    alexandrov_deficit_aniso: float
    serrin_deficit: float
    serrin_deficit_aniso: float
    reilly_residual: float
    omega_residual: float
    pohozaev_residual: float
    wx38_residual: float
    pdiv_residual: float
    pdiv_pointwise: float
    minkowski_residual: float
    alex_identity_residual: float
    alex_identity_strict: float
    overdet_identity_residual: float
    max_traceless_S: float
    fitted: WulffSphere
    hausdorff_dist: float
    fit_info: dict
    c0_bound: float
    c0_margin: float
    boundary_grad_min: float
    slice_s: float = np.nan
    slice_t0: float = np.nan
    slice_T1_proxy: float = np.nan
    slice_lambda: float = np.nan
    slice_norm: float = np.nan
    slice_slack: float = np.nan
    pinching_fraction: float = np.nan
    pinching_max_violation: float = np.nan
    solver_iterations: int = 0
    solver_residual: float = np.nan
    error: str = ""

    def to_dict(self):
        out = {}
        for k, v in asdict(self).items():
            if k == "fitted":
                out[k] = self.fitted.to_dict() if self.fitted is not None else None
            elif k == "fit_info":
                out[k] = {kk: (bool(vv) if isinstance(vv, (bool, np.bool_))
                               else float(vv))
                          for kk, vv in (v or {}).items()}
            elif isinstance(v, (np.floating, float, int, np.integer)):
                out[k] = float(v)
            else:
                out[k] = v
        return out


def analyze_case(sol, M, eps=np.nan, with_slice=True, p=None, seed=0,
                 n_slices=12):
    """Assemble the full DeficitReport for one solved case.

    ``M`` must already carry curvature data (aniso_curvature applied).
    """
    dom = sol.domain
    vol_grid = dom.integrate(np.ones(dom.shape))
    vol = surface_volume(M, origin=dom.center)
    mu = M.area("anisotropic")
    mu_t = M.area("euclidean")

    alex = alexandrov_deficit(sol, M, vol)
    serr = serrin_deficit(sol, M, vol)
    reil = reilly_residual(sol, M, vol)
    poho = pohozaev_residual(sol, M)
    pdiv = p_function(sol)
    hkd = hk_deficit(M, vol)
    chain = hk_chain_margin(sol, M, vol)

    fitted, dist, fit_info = fit_wulff(M, sol.integrand, seed=seed)
    tr = _attach_trace(sol, M)

    rep = DeficitReport(
        eps=eps, h=dom.h, volume_grid=vol_grid, volume_surface=vol,
        mu=mu, mu_tilde=mu_t,
        frakH=alex["frakH"], R1=alex["R1"], R1_tilde=alex["R1_tilde"],
        hk_deficit=hkd, hk_chain_margin=chain,
        alexandrov_deficit=alex["deficit_l1"],
        alexandrov_deficit_aniso=alex["deficit_l1_aniso"],
        serrin_deficit=serr["deficit_l1"],
        serrin_deficit_aniso=serr["deficit_l1_aniso"],
        reilly_residual=reil["residual"],
        omega_residual=omega_residual(sol, M, vol),
        pohozaev_residual=poho["residual"],
        wx38_residual=poho["companion_residual"],
        pdiv_residual=pdiv["residual"],
        pdiv_pointwise=pdiv["pointwise"],
        minkowski_residual=minkowski_residual(M),
        alex_identity_residual=alex["residual"],
        alex_identity_strict=alex["residual_strict"],
        overdet_identity_residual=serr["residual"],
        max_traceless_S=float(np.sqrt(np.maximum(
            np.nanmax(M.traceless_sq[~M.flagged] if M.flagged is not None
                      else M.traceless_sq), 0.0))),
        fitted=fitted, hausdorff_dist=dist, fit_info=fit_info,
        c0_bound=sol.c0_bound, c0_margin=sol.c0_margin,
        boundary_grad_min=float(np.min(tr["grad_norm"])),
        solver_iterations=sol.iterations, solver_residual=sol.residual,
    )
    if with_slice:
        try:
            gs = good_slice(sol, mu, p=p, n_slices=n_slices)
            rep.slice_s = gs.s
            rep.slice_t0 = gs.t0
            rep.slice_T1_proxy = gs.T1_proxy
            rep.slice_lambda = gs.lambda_s
            rep.slice_norm = gs.norm_S_ring
            rep.slice_slack = gs.slack
            frac, mv = pinching_check(gs.slice_surface)
            rep.pinching_fraction = frac
            rep.pinching_max_violation = mv
        except (AnalysisError, SurfaceError) as exc:
            rep.error = f"slice: {exc}"
    return rep


# ---- the stability experiment ------------------------------------------------------


def stability_experiment(integrand, eps_list, h, r=1.0, profile=3,
                         resolution=48, p=None, seed=0, n_slices=12,
                         solver_opts=None, keep_fields=False, verbose=False):
    """Solve and analyze a family of bump-perturbed Wulff balls.

    Returns a dict with one DeficitReport per eps (descending), the
    distance/deficit^theta ratio tables for the three stability exponents,
    and growth flags when a ratio increases monotonically by more than 3x
    across the family (evidence against boundedness at this resolution).
    """
    from .grid import GridDomain
    from .surface import PerturbedWulffProfile, StarLevelFn
    from .torsion import solve_torsion

    d = integrand.dim
    n = d - 1
    eps_list = sorted(eps_list, reverse=True)
    solver_opts = dict(solver_opts or {})
    reports = []
    cases = []
    warm = None
    for eps in eps_list:
        try:
            prof = PerturbedWulffProfile(integrand, r=r, eps=eps, profile=profile)
            dom = GridDomain(prof, h=h, center=np.zeros(d), r_interior=None)
            sol = solve_torsion(dom, integrand, warm_start=warm, **solver_opts)
            warm = sol.f if np.isfinite(sol.residual) else None
            M = sample_star(prof, resolution, dim=d)
            from .surface import aniso_curvature
            aniso_curvature(M, integrand, StarLevelFn(prof, np.zeros(d)))
            rep = analyze_case(sol, M, eps=eps, p=p, seed=seed,
                               n_slices=n_slices)
            if keep_fields:
                cases.append((sol, M))
            if verbose:
                print(f"  eps={eps:g}: hk={rep.hk_deficit:.3e} "
                      f"alex={rep.alexandrov_deficit:.3e} "
                      f"serrin={rep.serrin_deficit:.3e} "
                      f"dist={rep.hausdorff_dist:.3e}")
        except Exception as exc:  # keep the family running
            rep = _error_report(eps, h, str(exc))
            if verbose:
                print(f"  eps={eps:g}: FAILED ({exc})")
        reports.append(rep)

    ratios = _ratio_tables(reports, n)
    out = {"reports": reports, "ratios": ratios,
           "flags": _growth_flags(ratios), "eps": eps_list}
    if keep_fields:
        out["cases"] = cases
    return out


def _error_report(eps, h, msg):
    nanargs = {f.name: np.nan for f in DeficitReport.__dataclass_fields__.values()
               if f.name not in ("eps", "h", "fitted", "fit_info", "error",
                                 "solver_iterations")}
    return DeficitReport(eps=eps, h=h, fitted=None, fit_info={},
                         solver_iterations=0, error=msg, **nanargs)


def _ratio_tables(reports, n):
    th_vol = 1.0 / (n + 2)
    th_serrin = 1.0 / (2 * (n + 2))
    table = {"hk": [], "alex": [], "serrin": [], "thm11": []}
    for rep in reports:
        if rep.error and not np.isfinite(rep.hausdorff_dist):
            for k in table:
                table[k].append(np.nan)
            continue
        dist = rep.hausdorff_dist
        table["hk"].append(dist / rep.hk_deficit ** th_vol
                           if rep.hk_deficit > 0 else np.nan)
        table["alex"].append(dist / rep.alexandrov_deficit ** th_vol
                             if rep.alexandrov_deficit > 0 else np.nan)
        table["serrin"].append(dist / rep.serrin_deficit ** th_serrin
                               if rep.serrin_deficit > 0 else np.nan)
        p = n + 1.0
        if np.isfinite(rep.slice_norm) and rep.slice_norm > 0:
            table["thm11"].append(dist / rep.slice_norm ** (p / (p + 1)))
        else:
            table["thm11"].append(np.nan)
    return {k: np.asarray(v) for k, v in table.items()}


def _growth_flags(ratios, factor=3.0):
    flags = {}
    for k, v in ratios.items():
        w = v[np.isfinite(v)]
        grown = (len(w) >= 3 and np.all(np.diff(w) > 0)
                 and w[-1] / max(w[0], 1e-300) > factor)
        flags[k] = bool(grown)
    return flags
