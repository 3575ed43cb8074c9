"""Lattice scalar fields on star-shaped domains and their difference calculus.

A domain is described by a radius function rho on the unit sphere: the body
is {x : |x - center| < rho((x-center)/|x-center|)}.  Nodes of a uniform
rectangular lattice are classified inside/outside; inside nodes whose
first-neighbor leaves the body form the boundary band and carry fractional
crossing distances along each grid line (Shortley-Weller data), so Dirichlet
values can be imposed on the true boundary without cut cells.

Derivatives use second-order central stencils in the interior and the
non-uniform three-point variants at the band.  The anisotropic calculus of a
field f (gradient map, Hessian endomorphism and its trace and traceless
square) is assembled node-wise from an :class:`EllipticIntegrand`.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy import sparse


class GridError(RuntimeError):
    pass


class ResolutionError(GridError):
    """Lattice spacing too coarse for the requested domain."""


_BISECT_ITERS = 48
_SUBCELL = 4  # per-axis subsampling for band cell volume fractions


def _unit(vecs):
    n = np.linalg.norm(vecs, axis=-1, keepdims=True)
    return np.divide(vecs, n, out=np.zeros_like(vecs), where=n > 0)


class GridDomain:
    """Uniform lattice covering a star-shaped body, with boundary-band data.

    Attributes
    ----------
    dim, h, lo, shape : lattice geometry; node (i,...) sits at lo + h*(i,...)
    center : star center (always placed on a lattice node)
    active : bool lattice, nodes strictly inside the body
    band : bool lattice, active nodes with an outside first neighbor
    theta_plus, theta_minus : per-axis float lattices; fraction of h from a
        band node to the boundary crossing in the +/- direction, NaN where
        the neighbor is inside
    r_interior : optional interior-sphere radius metadata
    """

    def __init__(self, rho, h, center, pad=3, r_interior=None, rho_samples=4096,
                 theta_min=1e-4):
        center = np.asarray(center, dtype=float)
        self.dim = d = center.size
        self.h = h = float(h)
        self.rho = rho
        self.center = center
        self.r_interior = r_interior
        self.theta_min = float(theta_min)

        from .integrand import quasi_uniform_directions
        dirs = quasi_uniform_directions(rho_samples, d)
        rv = np.asarray(rho(dirs), dtype=float)
        if np.any(~np.isfinite(rv)) or np.any(rv <= 0):
            raise GridError("radius function must be positive and finite")
        self.rho_min = float(np.min(rv))
        self.rho_max = float(np.max(rv))
        if h >= self.rho_min / 8.0:
            raise ResolutionError(
                f"h={h:g} too coarse: need h < rho_min/8 = {self.rho_min / 8.0:g}")
        self.diameter = 2.0 * self.rho_max

        # tight per-axis box, with the star center kept on a lattice node
        surf = rv[:, None] * dirs
        n_lo = np.ceil(-np.min(surf, axis=0) / h).astype(int) + pad
        n_hi = np.ceil(np.max(surf, axis=0) / h).astype(int) + pad
        self.lo = center - n_lo * h
        self.shape = tuple(int(a + b + 1) for a, b in zip(n_lo, n_hi))

        P = self.node_coords()
        rel = P - center
        R = np.linalg.norm(rel, axis=-1)
        rho_node = np.full(R.shape, np.inf)
        nz = R > 0
        rho_node[nz] = np.asarray(rho(_unit(rel[nz])), dtype=float)
        level = R - rho_node
        level[~nz] = -np.min(rv)  # center node
        # nodes landing on the boundary to rounding accuracy count as outside,
        # so no stencil arm degenerates
        self.active = level < -1e-12 * self.rho_max

        self.band = np.zeros(self.shape, dtype=bool)
        self.theta_plus = [np.full(self.shape, np.nan) for _ in range(d)]
        self.theta_minus = [np.full(self.shape, np.nan) for _ in range(d)]
        for ax in range(d):
            for sign, store in ((+1, self.theta_plus[ax]), (-1, self.theta_minus[ax])):
                nbr_inside = _shift_bool(self.active, ax, -sign)
                cut = self.active & ~nbr_inside
                if not np.any(cut):
                    continue
                self.band |= cut
                idx = np.argwhere(cut)
                x0 = self.lo + self.h * idx
                e = np.zeros(d)
                e[ax] = sign * self.h
                # the floor keeps stencil arms away from degeneracy; it moves
                # the discrete boundary by at most theta_min * h
                store[tuple(idx.T)] = np.maximum(
                    self._bisect_crossing(x0, e), self.theta_min)

        self.interior = self.active & ~self.band
        self.n_active = int(np.count_nonzero(self.active))
        if self.n_active == 0:
            raise GridError("no interior nodes; refine the lattice")
        self.index = np.full(self.shape, -1, dtype=np.int64)
        self.index[self.active] = np.arange(self.n_active)
        self._weights = None
        self._fwd = None

    # ---- geometry -----------------------------------------------------------

    def node_coords(self):
        axes = [self.lo[i] + self.h * np.arange(self.shape[i]) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def active_points(self):
        return self.node_coords()[self.active]

    def level_value(self, P):
        """Signed star level |x-c| - rho at arbitrary points (neg = inside)."""
        rel = np.atleast_2d(P) - self.center
        R = np.linalg.norm(rel, axis=-1)
        out = np.empty_like(R)
        nz = R > 0
        out[nz] = R[nz] - np.asarray(self.rho(_unit(rel[nz])), dtype=float)
        out[~nz] = -self.rho_min
        return out

    def _bisect_crossing(self, x0, step):
        # level changes sign along x0 + s*step for s in (0, 1]
        s_lo = np.zeros(len(x0))
        s_hi = np.ones(len(x0))
        for _ in range(_BISECT_ITERS):
            s_mid = 0.5 * (s_lo + s_hi)
            inside = self.level_value(x0 + s_mid[:, None] * step) < 0.0
            s_lo = np.where(inside, s_mid, s_lo)
            s_hi = np.where(inside, s_hi, s_mid)
        return 0.5 * (s_lo + s_hi)

    def crossing_points(self):
        """Boundary crossing coordinates, as (axis, sign, node_indices, points)."""
        out = []
        for ax in range(self.dim):
            for sign, theta in ((+1, self.theta_plus[ax]), (-1, self.theta_minus[ax])):
                mask = np.isfinite(theta)
                if not np.any(mask):
                    continue
                idx = np.argwhere(mask)
                pts = self.lo + self.h * idx
                pts[:, ax] += sign * self.h * theta[mask]
                out.append((ax, sign, idx, pts))
        return out

    # ---- quadrature ---------------------------------------------------------

    def _cell_fractions(self, idx):
        k = _SUBCELL
        offs = (np.arange(k) + 0.5) / k - 0.5
        grids = np.meshgrid(*([offs] * self.dim), indexing="ij")
        offsets = np.stack([g.ravel() for g in grids], axis=-1) * self.h
        centers = self.lo + self.h * idx
        frac = np.zeros(len(idx))
        for o in offsets:
            frac += (self.level_value(centers + o) < 0.0)
        return frac / len(offsets)

    def volume_weights(self):
        """Per-node cell volumes: full cells inside, subcell-sampled fractions
        at the band, and the sliver of the body lying in cells of just-outside
        nodes folded into their nearest active neighbor."""
        if self._weights is not None:
            return self._weights
        w = np.zeros(self.shape)
        w[self.active] = self.h ** self.dim
        idx = np.argwhere(self.band)
        if len(idx):
            w[tuple(idx.T)] = self.h ** self.dim * self._cell_fractions(idx)

        # outer collar: outside nodes whose cell still dips into the body
        near = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dim):
            near |= _shift_bool(self.active, ax, +1) | _shift_bool(self.active, ax, -1)
        collar = near & ~self.active
        cidx = np.argwhere(collar)
        if len(cidx):
            frac = self._cell_fractions(cidx)
            keep = frac > 0
            cidx = cidx[keep]
            frac = frac[keep]
            offsets = np.array([o for o in _neighbor_offsets(self.dim) if np.any(o)])
            dist = np.linalg.norm(offsets, axis=1)
            order = np.argsort(dist, kind="stable")
            assigned = np.zeros(len(cidx), dtype=bool)
            for o in offsets[order]:
                tgt = cidx + o
                valid = (~assigned
                         & np.all((tgt >= 0) & (tgt < np.asarray(self.shape)), axis=1))
                if not np.any(valid):
                    continue
                act = np.zeros(len(cidx), dtype=bool)
                act[valid] = self.active[tuple(tgt[valid].T)]
                take = valid & act
                if np.any(take):
                    np.add.at(w, tuple(tgt[take].T), self.h ** self.dim * frac[take])
                    assigned |= take
        self._weights = w
        return w

    def integrate(self, g, mask=None):
        """Quadrature of a node-wise quantity over the body (or a sub-mask)."""
        w = self.volume_weights()
        sel = self.active if mask is None else (self.active & mask)
        vals = np.asarray(g)[sel]
        if not np.all(np.isfinite(vals)):
            raise GridError("non-finite values inside the integration mask")
        return float(np.sum(vals * w[sel]))

    # ---- forward-difference data for the energy solver -----------------------

    def _level_gradient(self, pts):
        step = self.h * 1e-4
        d = self.dim
        g = np.empty((len(pts), d))
        for ax in range(d):
            e = np.zeros(d)
            e[ax] = step
            g[:, ax] = (self.level_value(pts + e) - self.level_value(pts - e)) / (2 * step)
        return g

    def one_sided_ops(self, sign):
        """Sparse one-sided gradient operator with Dirichlet crossings.

        Returns (J, steps): J is a (dim*n_active, n_active) CSR matrix whose
        row block i maps active nodal values to the forward (sign=+1) or
        backward (sign=-1) difference along axis i; where the neighbor on
        that side is outside, the difference runs to the boundary crossing
        (value pinned to zero) over the shortened step.  steps is the
        (dim, n_active) array of step lengths actually used.
        """
        key = 1 if sign > 0 else -1
        if self._fwd is None:
            self._fwd = {}
        if key in self._fwd:
            return self._fwd[key]
        N = self.n_active
        d = self.dim
        steps = np.empty((d, N))
        to_nbr = np.empty((d, N), dtype=bool)
        rows, cols, vals = [], [], []
        aidx = np.argwhere(self.active)
        flat = self.index[self.active]
        thetas = self.theta_plus if key > 0 else self.theta_minus
        for ax in range(d):
            nbr = aidx.copy()
            nbr[:, ax] += key
            nbr_flat = self.index[tuple(nbr.T)]
            theta = thetas[ax][self.active]
            has_nbr = nbr_flat >= 0
            b = np.where(has_nbr, self.h, theta * self.h)
            if np.any(~np.isfinite(b)):
                raise GridError("active node without one-sided neighbor or crossing")
            steps[ax] = b
            to_nbr[ax] = has_nbr
            r0 = ax * N + flat
            rows.append(r0)
            cols.append(flat)
            vals.append(-key / b)
            rows.append(r0[has_nbr])
            cols.append(nbr_flat[has_nbr])
            vals.append(key / b[has_nbr])
        J = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(d * N, N))
        self._fwd[key] = (J, steps, to_nbr)
        return self._fwd[key]


def _neighbor_offsets(dim):
    """All offsets in {-1,0,1}^dim."""
    grids = np.meshgrid(*([np.array([-1, 0, 1])] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def orthant_signs(dim):
    """The 2^dim sign tuples, bit i of the index giving the sign of axis i."""
    return [tuple((+1 if (k >> i) & 1 else -1) for i in range(dim))
            for k in range(2 ** dim)]




def _shift_bool(mask, axis, by):
    """Shift a boolean lattice, padding with False (no wraparound)."""
    out = np.zeros_like(mask)
    src = [slice(None)] * mask.ndim
    dst = [slice(None)] * mask.ndim
    if by > 0:
        src[axis] = slice(0, -by)
        dst[axis] = slice(by, None)
    elif by < 0:
        src[axis] = slice(-by, None)
        dst[axis] = slice(0, by)
    else:
        return mask.copy()
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _shift_vals(arr, axis, by, fill=np.nan):
    out = np.full_like(arr, fill)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if by > 0:
        src[axis] = slice(0, -by)
        dst[axis] = slice(by, None)
    elif by < 0:
        src[axis] = slice(-by, None)
        dst[axis] = slice(0, by)
    else:
        return arr.copy()
    out[tuple(dst)] = arr[tuple(src)]
    return out


class ScalarField:
    """Nodal values on a GridDomain, plus traces at the boundary crossings.

    ``values`` is a full lattice array (NaN outside the active set).  The
    crossing traces feed the non-uniform band stencils; they default to zero,
    the natural choice for fields vanishing on the boundary.
    """

    def __init__(self, domain, values=None):
        self.domain = domain
        if values is None:
            values = np.full(domain.shape, np.nan)
            values[domain.active] = 0.0
        self.values = values
        # trace_plus[ax][node] = field value at the +ax crossing of that node
        self.trace_plus = [np.zeros(domain.shape) for _ in range(domain.dim)]
        self.trace_minus = [np.zeros(domain.shape) for _ in range(domain.dim)]

    @classmethod
    def zeros(cls, domain):
        return cls(domain)

    @classmethod
    def from_function(cls, domain, fn):
        """Sample a vectorized callable at nodes and boundary crossings."""
        f = cls(domain)
        pts = domain.active_points()
        f.values[domain.active] = np.asarray(fn(pts), dtype=float)
        for ax, sign, idx, cpts in domain.crossing_points():
            store = f.trace_plus if sign > 0 else f.trace_minus
            store[ax][tuple(idx.T)] = np.asarray(fn(cpts), dtype=float)
        return f

    @classmethod
    def from_active_vector(cls, domain, vec):
        f = cls(domain)
        f.values[domain.active] = np.asarray(vec, dtype=float)
        return f

    def active_values(self):
        return self.values[self.domain.active]

    def copy(self):
        out = ScalarField(self.domain, self.values.copy())
        out.trace_plus = [t.copy() for t in self.trace_plus]
        out.trace_minus = [t.copy() for t in self.trace_minus]
        return out

    def filled(self, fill=0.0):
        out = self.values.copy()
        out[~self.domain.active] = fill
        return out

    # ---- stencil derivatives -------------------------------------------------

    def gradient(self):
        """First derivatives at active nodes: central in the interior,
        non-uniform three-point against the crossing trace at the band."""
        dom = self.domain
        d = dom.dim
        g = np.full(dom.shape + (d,), np.nan)
        h = dom.h
        for ax in range(d):
            vp = _shift_vals(self.values, ax, -1)   # value at node+e_ax
            vm = _shift_vals(self.values, ax, +1)
            ap = _shift_bool(dom.active, ax, -1)    # node+e_ax active?
            am = _shift_bool(dom.active, ax, +1)
            thp = dom.theta_plus[ax]
            thm = dom.theta_minus[ax]
            gax = np.full(dom.shape, np.nan)

            m = dom.active & ap & am
            gax[m] = (vp[m] - vm[m]) / (2.0 * h)

            m = dom.active & ~ap & am  # crossing on +, node on -
            if np.any(m):
                b = thp[m] * h
                a = np.full_like(b, h)
                fb = self.trace_plus[ax][m]
                gax[m] = (fb * a**2 - vm[m] * b**2
                          + self.values[m] * (b**2 - a**2)) / (a * b * (a + b))
            m = dom.active & ap & ~am  # crossing on -, node on +
            if np.any(m):
                b = thm[m] * h
                a = np.full_like(b, h)
                fb = self.trace_minus[ax][m]
                gax[m] = -(fb * a**2 - vp[m] * b**2
                           + self.values[m] * (b**2 - a**2)) / (a * b * (a + b))
            m = dom.active & ~ap & ~am  # sliver: crossings on both sides
            if np.any(m):
                bp = thp[m] * h
                bm = thm[m] * h
                gax[m] = (self.trace_plus[ax][m] - self.trace_minus[ax][m]) / (bp + bm)
            g[..., ax] = gax
        return g

    def hessian(self, grad=None):
        """Symmetric second derivatives at active nodes.

        Pure terms use the three-point (Shortley-Weller at the band) formula;
        mixed terms use the four-point cross where all diagonal neighbors are
        active and otherwise differentiate the gradient field one-sidedly,
        averaging the two orderings so the result is symmetric.
        """
        dom = self.domain
        d = dom.dim
        h = dom.h
        if grad is None:
            grad = self.gradient()
        H = np.full(dom.shape + (d, d), np.nan)

        for ax in range(d):
            vp = _shift_vals(self.values, ax, -1)
            vm = _shift_vals(self.values, ax, +1)
            ap = _shift_bool(dom.active, ax, -1)
            am = _shift_bool(dom.active, ax, +1)
            thp = dom.theta_plus[ax]
            thm = dom.theta_minus[ax]
            out = np.full(dom.shape, np.nan)

            m = dom.active & ap & am
            out[m] = (vp[m] - 2.0 * self.values[m] + vm[m]) / h**2

            m = dom.active & ~ap & am
            if np.any(m):
                b = thp[m] * h
                a = np.full_like(b, h)
                fb = self.trace_plus[ax][m]
                out[m] = 2.0 * (fb / (b * (a + b)) - self.values[m] / (a * b)
                                + vm[m] / (a * (a + b)))
            m = dom.active & ap & ~am
            if np.any(m):
                b = thm[m] * h
                a = np.full_like(b, h)
                fb = self.trace_minus[ax][m]
                out[m] = 2.0 * (fb / (b * (a + b)) - self.values[m] / (a * b)
                                + vp[m] / (a * (a + b)))
            m = dom.active & ~ap & ~am
            if np.any(m):
                bp = thp[m] * h
                bm = thm[m] * h
                out[m] = 2.0 * (self.trace_plus[ax][m] / (bp * (bp + bm))
                                - self.values[m] / (bp * bm)
                                + self.trace_minus[ax][m] / (bm * (bp + bm)))
            H[..., ax, ax] = out

        for i in range(d):
            for j in range(i + 1, d):
                Hij = self._mixed_derivative(i, j, grad)
                H[..., i, j] = Hij
                H[..., j, i] = Hij
        return H

    def _mixed_derivative(self, i, j, grad):
        dom = self.domain
        h = dom.h
        vpp = _shift_vals(_shift_vals(self.values, i, -1), j, -1)
        vpm = _shift_vals(_shift_vals(self.values, i, -1), j, +1)
        vmp = _shift_vals(_shift_vals(self.values, i, +1), j, -1)
        vmm = _shift_vals(_shift_vals(self.values, i, +1), j, +1)
        ok = (dom.active
              & _shift_bool(_shift_bool(dom.active, i, -1), j, -1)
              & _shift_bool(_shift_bool(dom.active, i, -1), j, +1)
              & _shift_bool(_shift_bool(dom.active, i, +1), j, -1)
              & _shift_bool(_shift_bool(dom.active, i, +1), j, +1))
        out = np.full(dom.shape, np.nan)
        out[ok] = (vpp[ok] - vpm[ok] - vmp[ok] + vmm[ok]) / (4.0 * h**2)

        rest = dom.active & ~ok
        if np.any(rest):
            dji = _one_sided_axis_derivative(dom, grad[..., i], j)
            dij = _one_sided_axis_derivative(dom, grad[..., j], i)
            out[rest] = 0.5 * (dji[rest] + dij[rest])
        return out


def _one_sided_axis_derivative(dom, field, ax):
    """d(field)/d(x_ax) from active-node values only; central where possible,
    else 3-point (or 2-point) one-sided.  Used for band mixed derivatives."""
    h = dom.h
    vp = _shift_vals(field, ax, -1)
    vm = _shift_vals(field, ax, +1)
    vp2 = _shift_vals(field, ax, -2)
    vm2 = _shift_vals(field, ax, +2)
    ap = _shift_bool(dom.active, ax, -1)
    am = _shift_bool(dom.active, ax, +1)
    ap2 = _shift_bool(dom.active, ax, -2)
    am2 = _shift_bool(dom.active, ax, +2)
    out = np.full(dom.shape, np.nan)

    m = dom.active & ap & am
    out[m] = (vp[m] - vm[m]) / (2.0 * h)
    m = dom.active & ap & ~am & ap2
    out[m] = (-3.0 * field[m] + 4.0 * vp[m] - vp2[m]) / (2.0 * h)
    m = dom.active & ap & ~am & ~ap2
    out[m] = (vp[m] - field[m]) / h
    m = dom.active & ~ap & am & am2
    out[m] = (3.0 * field[m] - 4.0 * vm[m] + vm2[m]) / (2.0 * h)
    m = dom.active & ~ap & am & ~am2
    out[m] = (field[m] - vm[m]) / h
    return out


@dataclass
class FHessianField:
    """Anisotropic calculus of a scalar field, node-wise on the lattice.

    ``bf`` is the Hessian endomorphism hess_halfF2(grad) . hess, ``lapF`` its
    trace, ``traceless_sq`` the squared norm of its trace-free part, and
    ``gradF`` the anisotropic gradient vector.  Frame-dependent entries are
    NaN on the flagged critical set (|grad| below the floor).
    """

    domain: GridDomain
    grad: np.ndarray
    hess: np.ndarray
    gradF: np.ndarray
    F_of_grad: np.ndarray
    bf: np.ndarray
    lapF: np.ndarray
    traceless_sq: np.ndarray
    critical: np.ndarray
    grad_floor: float
    valid: np.ndarray = dataclass_field(init=False)

    def __post_init__(self):
        self.valid = self.domain.active & ~self.critical


def f_calculus(f, integrand, grad_floor=None):
    """Assemble the anisotropic derivative fields of ``f``.

    Nodes where |grad f| falls below ``grad_floor`` (default 1e-6 * domain
    diameter) are flagged critical and excluded from frame-dependent output;
    this operationalizes removing the measure-zero critical set.
    """
    dom = f.domain
    d = dom.dim
    if grad_floor is None:
        grad_floor = 1e-6 * dom.diameter
    grad = f.gradient()
    hess = f.hessian(grad=grad)

    act = dom.active
    gn = np.linalg.norm(grad, axis=-1)
    critical = act & ~(gn > grad_floor)
    # sliver band nodes can lack the neighbors for a full Hessian stencil;
    # they join the excluded set alongside the critical points
    critical |= act & ~np.all(np.isfinite(hess), axis=(-2, -1))

    ok = act & ~critical
    gok = grad[ok]
    B = integrand.hess_halfF2(gok)
    bf_ok = np.einsum("nij,njk->nik", B, hess[ok])
    lap_ok = np.einsum("nii->n", bf_ok)
    t2_ok = np.einsum("nij,nji->n", bf_ok, bf_ok) - lap_ok**2 / (d)

    gradF = np.full(dom.shape + (d,), np.nan)
    F_of_grad = np.full(dom.shape, np.nan)
    bf = np.full(dom.shape + (d, d), np.nan)
    lapF = np.full(dom.shape, np.nan)
    t2 = np.full(dom.shape, np.nan)

    gradF[ok] = np.einsum("nij,nj->ni", B, gok)
    F_of_grad[ok] = integrand.F(gok)
    bf[ok] = bf_ok
    lapF[ok] = lap_ok
    t2[ok] = t2_ok

    return FHessianField(domain=dom, grad=grad, hess=hess, gradF=gradF,
                         F_of_grad=F_of_grad, bf=bf, lapF=lapF,
                         traceless_sq=t2, critical=critical,
                         grad_floor=float(grad_floor))


def volume_integral(g, dom, mask=None):
    """Integral of a node-wise quantity over the body."""
    return dom.integrate(g, mask=mask)


# ---- point sampling ------------------------------------------------------


def multilinear_sample(lattice, lo, h, points, fill=0.0):
    """Multilinear interpolation of a full lattice array at arbitrary points."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    d = P.shape[1]
    vals = np.where(np.isfinite(lattice), lattice, fill)
    u = (P - lo) / h
    base = np.floor(u).astype(np.int64)
    shape = np.asarray(lattice.shape)
    base = np.clip(base, 0, shape - 2)
    frac = u - base
    out = np.zeros(len(P))
    for corner in range(2 ** d):
        bits = [(corner >> ax) & 1 for ax in range(d)]
        wgt = np.ones(len(P))
        idx = []
        for ax, b in enumerate(bits):
            wgt *= frac[:, ax] if b else (1.0 - frac[:, ax])
            idx.append(base[:, ax] + b)
        out += wgt * vals[tuple(idx)]
    return out


class FieldSampler:
    """Evaluate a field and its node-stencil derivatives at arbitrary points.

    Nodal gradient/Hessian fields are interpolated multilinearly; this keeps
    the second derivatives at interpolation points O(h^2)-consistent, which
    sampling difference stencils of the interpolant itself would not.
    A point is valid when every corner of its containing cell is active for
    all interpolated lattices.
    """

    def __init__(self, f, calc=None, integrand=None):
        self.f = f
        self.domain = f.domain
        if calc is None:
            if integrand is None:
                raise GridError("need a precomputed FHessianField or an integrand")
            calc = f_calculus(f, integrand)
        self.calc = calc

    def cell_valid(self, points):
        dom = self.domain
        P = np.atleast_2d(np.asarray(points, dtype=float))
        u = (P - dom.lo) / dom.h
        base = np.floor(u).astype(np.int64)
        shape = np.asarray(dom.shape)
        inb = np.all((base >= 0) & (base <= shape - 2), axis=1)
        ok = inb.copy()
        d = dom.dim
        basec = np.clip(base, 0, shape - 2)
        for corner in range(2 ** d):
            bits = [(corner >> ax) & 1 for ax in range(d)]
            idx = tuple(basec[:, ax] + b for ax, b in enumerate(bits))
            ok &= dom.active[idx]
        return ok & inb

    def value(self, points):
        dom = self.domain
        return multilinear_sample(self.f.values, dom.lo, dom.h, points)

    def gradient(self, points):
        dom = self.domain
        P = np.atleast_2d(np.asarray(points, dtype=float))
        g = np.empty((len(P), dom.dim))
        for ax in range(dom.dim):
            g[:, ax] = multilinear_sample(self.calc.grad[..., ax], dom.lo, dom.h, P)
        return g

    def hessian(self, points):
        dom = self.domain
        P = np.atleast_2d(np.asarray(points, dtype=float))
        d = dom.dim
        H = np.empty((len(P), d, d))
        for i in range(d):
            for j in range(i, d):
                Hij = multilinear_sample(self.calc.hess[..., i, j], dom.lo, dom.h, P)
                H[:, i, j] = Hij
                H[:, j, i] = Hij
        return H

    def traceless_sq(self, points):
        dom = self.domain
        return multilinear_sample(self.calc.traceless_sq, dom.lo, dom.h, points)
