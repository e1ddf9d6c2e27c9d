"""Local problems on cylindrical stars and the derived error indicators.

For every base-mesh node the residual of the computed solution is tested
against an enriched space (P2 + bubble horizontally, quadratic vertically,
vanishing on the whole star boundary except the trace face).  The local
matrix separates as ``Kx (x) G0q + Mx (x) G1q`` with the same vertical factors
for every star, so all local solves share one generalized eigenbasis of
(G1q, G0q): per star only a batch of small horizontal systems remains.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg

from . import forms
from .errors import DataError


# ---------------------------------------------------------------------------
# shared per-mesh context


class _YContext:
    """Vertical matrices of the enriched quadratic space, banded forms included.

    The vertical Gram matrices span the full dynamic range of the graded
    partition; local solves therefore diagonalize the (small, benign)
    horizontal pencil of each star and treat the vertical direction by
    banded Cholesky, which is elimination and hence scale-robust.
    """

    def __init__(self, ypart, alpha):
        M = ypart.M
        g0_full, g1_full = forms.quadratic_vertical_grams(ypart, alpha)
        nfree = 2 * M  # drop the vertex node at y = Y
        self.g0 = g0_full[:nfree, :nfree]
        self.g1 = g1_full[:nfree, :nfree]
        c0_full, c1_full = forms.cross_vertical_grams(ypart, alpha)
        self.c0 = c0_full[:nfree, :]
        self.c1 = c1_full[:nfree, :]
        self.g0_band = _upper_band(self.g0, 2)
        self.g1_band = _upper_band(self.g1, 2)
        self.nfree = nfree


def _upper_band(a, width):
    n = a.shape[0]
    ab = np.zeros((width + 1, n))
    for k in range(width + 1):
        ab[width - k, k:] = np.diagonal(a, k)
    return ab


def _solve_star_system(kx, mx, b, yctx):
    """Solve (kx (x) G0 + mx (x) G1) eta = b through the horizontal eigenbasis.

    Returns (eta, energy2).  The horizontal pencil (kx, mx) is small and
    well conditioned; each eigenmode leaves one SPD banded vertical system.
    """
    lam, q = scipy.linalg.eigh(kx, mx)
    bt = q.T @ b
    zt = np.empty_like(bt)
    e2 = 0.0
    for i in range(lam.size):
        ab = yctx.g1_band + max(lam[i], 0.0) * yctx.g0_band
        zt[i] = scipy.linalg.solveh_banded(ab, bt[i])
        e2 += float(zt[i] @ bt[i])
    return q @ zt, e2


class _ElementData:
    """Per-element horizontal matrices of the enriched basis (vectorized)."""

    def __init__(self, base, space_tag, f, data_degree, chunk=4096):
        dim = base.dim
        vals_ref, grads_ref, nb = _reference_basis(dim, space_tag)
        ref_pts, ref_w = forms.simplex_quadrature(dim, 8)
        d_pts, d_w = forms.simplex_quadrature(dim, data_degree)
        ne = base.n_elements
        nvx = dim + 1
        self.nb = nb
        self.kx = np.empty((ne, nb, nb))
        self.mx = np.empty((ne, nb, nb))
        self.kxc = np.empty((ne, nb, nvx))
        self.mxc = np.empty((ne, nb, nvx))
        self.fload = np.empty((ne, nb))
        self.osc2 = np.empty(ne)
        verts = base.vertices[base.elements]
        measures = base.element_measures()
        vol_ref = ref_w.sum()
        vals = vals_ref(ref_pts)                      # (np, nb)
        gref = grads_ref(ref_pts)                     # (np, nb, dim)
        lam = np.column_stack([1.0 - ref_pts.sum(axis=1), ref_pts])
        p1_ref = np.array([[-1.0] * dim] + np.eye(dim).tolist())  # (nvx, dim)
        d_vals = vals_ref(d_pts)
        d_lam = np.column_stack([1.0 - d_pts.sum(axis=1), d_pts])
        for lo in range(0, ne, chunk):
            sl = slice(lo, min(lo + chunk, ne))
            v = verts[sl]
            jac = np.swapaxes(v[:, 1:] - v[:, 0:1], 1, 2)      # (nc, dim, dim)
            inv_j = np.linalg.inv(jac)
            scale = measures[sl] / vol_ref
            gphys = np.einsum("pbd,cde->cpbe", gref, inv_j)
            self.kx[sl] = np.einsum("cpbe,cpqe,p,c->cbq", gphys, gphys,
                                    ref_w, scale, optimize=True)
            self.mx[sl] = np.einsum("pb,pq,p,c->cbq", vals, vals,
                                    ref_w, scale)
            p1g = np.einsum("vd,cde->cve", p1_ref, inv_j)
            self.kxc[sl] = np.einsum("cpbe,cve,p,c->cbv", gphys, p1g,
                                     ref_w, scale, optimize=True)
            self.mxc[sl] = np.einsum("pb,pv,p,c->cbv", vals, lam, ref_w, scale)
            # data terms, degree `data_degree`
            pts = v[:, 0, None, :] + np.einsum("pr,crd->cpd", d_pts,
                                               v[:, 1:] - v[:, 0:1])
            fv = np.asarray(f(pts.reshape(-1, dim)), dtype=float)
            fv = fv.reshape(pts.shape[0], -1)
            if not np.all(np.isfinite(fv)):
                bad = pts.reshape(-1, dim)[~np.isfinite(fv.ravel())][0]
                raise DataError(
                    f"data function returned a non-finite value at {bad.tolist()}")
            dw = d_w / d_w.sum()
            self.fload[sl] = np.einsum("cp,pb,p,c->cb", fv, d_vals, dw,
                                       measures[sl])
            mean = (fv * dw[None, :]).sum(axis=1)
            self.osc2[sl] = measures[sl] * np.einsum(
                "cp,p->c", (fv - mean[:, None]) ** 2, dw)
        self.p1_lam = d_lam


def _reference_basis(dim, space_tag):
    if dim == 1:
        funcs, derivs = forms.enriched_basis_1d(space_tag)
        nb = len(funcs)

        def vals(pts):
            l1 = pts[:, 0]
            return np.stack([fn(1.0 - l1, l1) for fn in funcs], axis=1)

        def grads(pts):
            l1 = pts[:, 0]
            return np.stack([d(1.0 - l1, l1) for d in derivs],
                            axis=1)[:, :, None]

        return vals, grads, nb
    vals_f, grads_f = forms.enriched_basis_2d(space_tag)
    nb = 7 if space_tag == "bubble" else 6

    def vals(pts):
        lam = (1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1])
        return np.stack(vals_f(lam), axis=1)

    def grads(pts):
        lam = (1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1])
        d1, d2 = grads_f(lam)
        return np.stack([np.stack(d1, axis=1), np.stack(d2, axis=1)], axis=2)

    return vals, grads, nb


def _star_dof_maps(base, space_tag):
    """For every node: member elements, local-dof -> star-dof tables, patch verts.

    Star dofs: the center vertex function (interior centers only), midpoint
    functions of edges interior to the patch, and one bubble per element;
    everything else sits on the constrained part of the star boundary.
    """
    dim = base.dim
    boundary = base.boundary_vertex_mask()
    adj = base.vertex_to_elements()
    elements = base.elements
    with_bubble = space_tag == "bubble"
    edge_counts = base.edge_counts() if dim == 2 else None
    out = []
    for z in range(base.n_vertices):
        elems = adj[z]
        patch_verts = np.unique(elements[elems].ravel())
        pv_index = {int(v): i for i, v in enumerate(patch_verts)}
        maps = []
        ndof = 0
        center_dof = -1
        if not boundary[z]:
            center_dof = ndof
            ndof += 1
        if dim == 1:
            for e in elems:
                a, b = elements[e]
                loc = [-1, -1, ndof]  # hats, quadratic bubble
                if a == z and center_dof >= 0:
                    loc[0] = center_dof
                if b == z and center_dof >= 0:
                    loc[1] = center_dof
                ndof += 1
                if with_bubble:
                    loc.append(ndof)
                    ndof += 1
                maps.append((e, loc, [pv_index[int(a)], pv_index[int(b)]]))
        else:
            star_edge_count = {}
            for e in elems:
                tri = elements[e]
                for i in range(3):
                    u, v = tri[(i + 1) % 3], tri[(i + 2) % 3]
                    k = (u, v) if u < v else (v, u)
                    star_edge_count[k] = star_edge_count.get(k, 0) + 1
            edge_dof = {}
            for k, cnt in sorted(star_edge_count.items()):
                if z in k and cnt == 2:
                    edge_dof[k] = -2  # placeholder, assigned below
            for k in sorted(edge_dof):
                edge_dof[k] = ndof
                ndof += 1
            for e in elems:
                tri = elements[e]
                loc = [-1] * (7 if with_bubble else 6)
                for i in range(3):
                    if tri[i] == z and center_dof >= 0:
                        loc[i] = center_dof
                    u, v = tri[(i + 1) % 3], tri[(i + 2) % 3]
                    k = (u, v) if u < v else (v, u)
                    if k in edge_dof:
                        loc[3 + i] = edge_dof[k]
                if with_bubble:
                    loc[6] = ndof
                    ndof += 1
                maps.append((e, loc, [pv_index[int(t)] for t in tri]))
        out.append((elems, maps, patch_verts, ndof))
    return out


# ---------------------------------------------------------------------------
# indicator containers


@dataclass
class StarProblem:
    """Assembled local problem of one cylindrical star."""

    star: "object"
    space_tag: str
    kx: np.ndarray
    mx: np.ndarray
    g0: np.ndarray
    g1: np.ndarray
    load: np.ndarray            # (n_x_dofs, n_y_dofs)
    eta: np.ndarray             # solution coefficients, same shape
    energy2: float

    def dense_matrix(self):
        return np.kron(self.kx, self.g0) + np.kron(self.mx, self.g1)

    @property
    def n_dofs(self):
        return self.load.size


@dataclass
class IndicatorSet:
    """Per-node indicators E, osc(f), optional flux oscillation, and totals."""

    node_estimator: np.ndarray
    node_osc: np.ndarray
    node_flux: np.ndarray | None
    star_sizes: np.ndarray
    element_osc2: np.ndarray
    ds: float
    s: float
    element_h: np.ndarray
    problems: list = dc_field(default_factory=list)

    @property
    def node_tau(self):
        t2 = self.node_estimator**2 + self.node_osc**2
        if self.node_flux is not None:
            t2 = t2 + self.node_flux**2
        return np.sqrt(t2)

    @property
    def estimator_total(self):
        return float(np.sqrt(np.sum(self.node_estimator**2)))

    @property
    def oscillation_total(self):
        t2 = np.sum(self.node_osc**2)
        if self.node_flux is not None:
            t2 = t2 + np.sum(self.node_flux**2)
        return float(np.sqrt(t2))

    @property
    def tau_total(self):
        return float(np.sqrt(np.sum(self.node_tau**2)))

    @property
    def element_osc_total(self):
        """Element-wise data oscillation d_s h_K^2s ||f - mean||^2, summed."""
        t2 = float(np.sum(self.ds * self.element_h ** (2.0 * self.s)
                          * self.element_osc2))
        if self.node_flux is not None:
            t2 += float(np.sum(self.node_flux**2))
        return float(np.sqrt(t2))

    def report_totals(self):
        """(estimator, oscillation, tau) as reported per iteration.

        The oscillation follows the element-wise computation (the node sum
        counts every element once per vertex and runs systematically hotter).
        """
        e = self.estimator_total
        o = self.element_osc_total
        return e, o, float(np.hypot(e, o))


@dataclass
class ElementIndicators:
    est2: np.ndarray
    osc2: np.ndarray

    @property
    def tau2(self):
        return self.est2 + self.osc2


# ---------------------------------------------------------------------------
# the driver


def estimate(cyl, field, f, params, space_tag="bubble", include_flux=False,
             data_degree=7, keep_problems=False):
    """Solve every star problem and collect the indicator set."""
    base = cyl.base
    ypart = cyl.ypart
    M = ypart.M
    yctx = _YContext(ypart, params.alpha)
    edata = _ElementData(base, space_tag, f, data_degree)
    dofmaps = _star_dof_maps(base, space_tag)
    grid = field.grid()
    nv = base.n_vertices
    est = np.zeros(nv)
    sizes = np.zeros(nv, dtype=np.int64)
    hstar = np.zeros(nv)
    h = base.element_diameters()
    problems = [None] * nv if keep_problems else []

    elements = base.elements

    def run_node(z):
        elems, maps, patch_verts, ndof = dofmaps[z]
        sizes[z] = len(elems)
        hstar[z] = h[elems].min()
        if ndof == 0:
            return
        kx = np.zeros((ndof, ndof))
        mx = np.zeros((ndof, ndof))
        kxc = np.zeros((ndof, len(patch_verts)))
        mxc = np.zeros((ndof, len(patch_verts)))
        fs = np.zeros(ndof)
        for e, loc, cols in maps:
            keep = [(i, d) for i, d in enumerate(loc) if d >= 0]
            li = [i for i, _ in keep]
            ld = [d for _, d in keep]
            kx[np.ix_(ld, ld)] += edata.kx[e][np.ix_(li, li)]
            mx[np.ix_(ld, ld)] += edata.mx[e][np.ix_(li, li)]
            kxc[np.ix_(ld, cols)] += edata.kxc[e][li]
            mxc[np.ix_(ld, cols)] += edata.mxc[e][li]
            fs[ld] += edata.fload[e][li]
        vp = grid[patch_verts]                        # (npatch, M+1)
        b = -(kxc @ vp @ yctx.c0.T + mxc @ vp @ yctx.c1.T)
        b[:, 0] += params.ds * fs
        eta, e2 = _solve_star_system(kx, mx, b, yctx)
        est[z] = np.sqrt(max(0.0, e2))
        if keep_problems:
            problems[z] = StarProblem(
                star=None, space_tag=space_tag, kx=kx, mx=mx,
                g0=yctx.g0, g1=yctx.g1, load=b, eta=eta, energy2=e2)

    nthreads = int(os.environ.get("FRAC_AFEM_THREADS", "1") or "1")
    if nthreads > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            list(ex.map(run_node, range(nv)))
    else:
        for z in range(nv):
            run_node(z)

    # data oscillation per node and (element-wise) per element
    osc = np.zeros(nv)
    star_osc2 = np.zeros(nv)
    np.add.at(star_osc2, elements.ravel(),
              np.repeat(edata.osc2, elements.shape[1]))
    osc = np.sqrt(params.ds) * hstar**params.s * np.sqrt(star_osc2)

    flux = _flux_oscillation(cyl, field, params.alpha) if include_flux else None

    ind = IndicatorSet(
        node_estimator=est, node_osc=osc, node_flux=flux,
        star_sizes=sizes, element_osc2=edata.osc2, ds=params.ds, s=params.s,
        element_h=h.copy(), problems=problems if keep_problems else [])
    return ind


def _flux_oscillation(cyl, field, alpha):
    """Vertical-column flux oscillation |y^a grad V - sigma| in the y^-a norm."""
    base = cyl.base
    ypart = cyl.ypart
    M = ypart.M
    g0_full, g1_full = forms.p1_vertical_grams(ypart, alpha)
    grid = field.grid()
    elements = base.elements
    X = grid[elements]                        # (ne, nvx, M+1)
    vol = base.element_measures()
    grads = _p1_grads_all(base)               # (ne, nvx, dim)
    nvx = base.dim + 1

    kx_loc = np.einsum("eik,ejk,e->eij", grads, grads, vol)
    m_ref = (np.ones((nvx, nvx)) + np.eye(nvx)) / (nvx * (nvx + 1))
    mx_loc = m_ref[None] * vol[:, None, None]

    q0 = np.einsum("eil,lm->eim", X, g0_full)
    q1 = np.einsum("eil,lm->eim", X, g1_full)
    t1 = (np.einsum("eij,eil,ejl->e", kx_loc, X, q0)
          + np.einsum("eij,eil,ejl->e", mx_loc, X, q1))

    widths = ypart.widths()
    w0 = np.array([forms.weighted_moment(*ypart.interval(k), alpha, 0)
                   for k in range(M)])
    # integrals of the level hats and their slopes against y^alpha and 1
    hat_w = np.zeros(M + 1)
    hat_u = np.zeros(M + 1)
    slope_w = np.zeros(M + 1)
    slope_u = np.zeros(M + 1)
    w1 = np.array([forms.weighted_moment(*ypart.interval(k), alpha, 1)
                   for k in range(M)])
    for k in range(M):
        a, b = ypart.interval(k)
        hk = widths[k]
        # hat at level k on [a,b]: (b-y)/h ; hat at level k+1: (y-a)/h
        hat_w[k] += (b * w0[k] - w1[k]) / hk
        hat_w[k + 1] += (w1[k] - a * w0[k]) / hk
        hat_u[k] += hk / 2.0
        hat_u[k + 1] += hk / 2.0
        slope_w[k] += -w0[k] / hk
        slope_w[k + 1] += w0[k] / hk
        slope_u[k] += -1.0
        slope_u[k + 1] += 1.0

    dim = base.dim
    # weighted and unweighted flux integrals per element column
    xw = np.einsum("eil,l->ei", X, hat_w)
    xu = np.einsum("eil,l->ei", X, hat_u)
    fw_x = np.einsum("eid,ei,e->ed", grads, xw, vol)
    fu_x = np.einsum("eid,ei,e->ed", grads, xu, vol)
    yw = np.einsum("eil,l->ei", X, slope_w)
    yu = np.einsum("eil,l->ei", X, slope_u)
    fw_y = yw.sum(axis=1) * vol / nvx
    fu_y = yu.sum(axis=1) * vol / nvx
    fluxw = np.concatenate([fw_x, fw_y[:, None]], axis=1)
    fluxu = np.concatenate([fu_x, fu_y[:, None]], axis=1)

    wm_neg = forms.weighted_moment(0.0, ypart.Y, -alpha, 0)
    adj = base.vertex_to_elements()
    out = np.zeros(base.n_vertices)
    for z in range(base.n_vertices):
        elems = adj[z]
        t1_z = t1[elems].sum()
        t2_z = fluxu[elems].sum(axis=0)
        sw_z = fluxw[elems].sum(axis=0)
        area = vol[elems].sum()
        sigma = sw_z / (area * ypart.Y)
        val = t1_z - 2.0 * sigma @ t2_z + (sigma @ sigma) * area * wm_neg
        out[z] = np.sqrt(max(0.0, val))
    return out


def _p1_grads_all(base):
    verts = base.vertices[base.elements]
    if base.dim == 1:
        h = verts[:, 1, 0] - verts[:, 0, 0]
        return np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
    from .system import _p1_grads_2d
    return _p1_grads_2d(verts)


# ---------------------------------------------------------------------------
# single-star interface and scalar helpers


def solve_local(star_obj, field, f, params, space_tag="bubble", data_degree=7):
    """Assemble and solve the enriched problem of one star."""
    cyl = field.cyl
    base = cyl.base
    z = star_obj.center
    ypart = cyl.ypart
    yctx = _YContext(ypart, params.alpha)
    edata = _ElementData(base, space_tag, f, data_degree)
    dofmaps = _star_dof_maps(base, space_tag)
    elems, maps, patch_verts, ndof = dofmaps[z]
    grid = field.grid()
    kx = np.zeros((ndof, ndof))
    mx = np.zeros((ndof, ndof))
    kxc = np.zeros((ndof, len(patch_verts)))
    mxc = np.zeros((ndof, len(patch_verts)))
    fs = np.zeros(ndof)
    for e, loc, cols in maps:
        keep = [(i, d) for i, d in enumerate(loc) if d >= 0]
        li = [i for i, _ in keep]
        ld = [d for _, d in keep]
        kx[np.ix_(ld, ld)] += edata.kx[e][np.ix_(li, li)]
        mx[np.ix_(ld, ld)] += edata.mx[e][np.ix_(li, li)]
        kxc[np.ix_(ld, cols)] += edata.kxc[e][li]
        mxc[np.ix_(ld, cols)] += edata.mxc[e][li]
        fs[ld] += edata.fload[e][li]
    vp = grid[patch_verts]
    b = -(kxc @ vp @ yctx.c0.T + mxc @ vp @ yctx.c1.T)
    b[:, 0] += params.ds * fs
    if ndof == 0:
        return StarProblem(star=star_obj, space_tag=space_tag,
                           kx=kx, mx=mx, g0=yctx.g0, g1=yctx.g1,
                           load=b, eta=b.copy(), energy2=0.0)
    eta, e2 = _solve_star_system(kx, mx, b, yctx)
    return StarProblem(star=star_obj, space_tag=space_tag, kx=kx, mx=mx,
                       g0=yctx.g0, g1=yctx.g1, load=b, eta=eta,
                       energy2=max(0.0, e2))


def indicator(sp):
    """Energy seminorm of the local solution, sqrt(eta' A eta) = sqrt(eta' b)."""
    return float(np.sqrt(max(0.0, sp.energy2)))


def oscillation_node(star_obj, f, params, base, degree=7):
    """d_s^(1/2) h^s-weighted L2 distance of f from its element averages."""
    ref_pts, ref_w = forms.simplex_quadrature(base.dim, degree)
    dw = ref_w / ref_w.sum()
    total = 0.0
    for e in star_obj.element_ids:
        v = base.vertices[base.elements[e]]
        pts = v[0] + ref_pts @ (v[1:] - v[0])
        fv = np.asarray(f(pts.reshape(-1, base.dim)), dtype=float).ravel()
        mean = float(fv @ dw)
        total += base.element_measures()[e] * float(((fv - mean) ** 2) @ dw)
    return float(np.sqrt(params.ds) * star_obj.h_star**params.s
                 * np.sqrt(total))


def oscillation_flux(star_obj, field, alpha):
    """Flux oscillation of one star (see _flux_oscillation)."""
    vals = _flux_oscillation(field.cyl, field, alpha)
    return float(vals[star_obj.center])


def to_elementwise(ind, base):
    """Convert node indicators to element indicators, conserving the total.

    Every node spreads E^2 equally over its star members; the element
    oscillation uses the element-average distance with the element diameter.
    """
    nv = base.n_vertices
    ne = base.n_elements
    shares = ind.node_estimator**2 / np.maximum(ind.star_sizes, 1)
    if ind.node_flux is not None:
        shares = shares + ind.node_flux**2 / np.maximum(ind.star_sizes, 1)
    est2 = np.zeros(ne)
    adj = base.vertex_to_elements()
    for z in range(nv):
        est2[adj[z]] += shares[z]
    osc2 = ind.ds * ind.element_h ** (2.0 * ind.s) * ind.element_osc2
    return ElementIndicators(est2=est2, osc2=osc2)


def effectivity(ind, error):
    if error == 0.0:
        raise ValueError("effectivity is undefined for zero error")
    return ind.tau_total / error


def write_indicator_csv(ind, path):
    """Per-node dump: node id, estimator, oscillation, total indicator."""
    tau = ind.node_tau
    with open(path, "w") as fh:
        fh.write("node,estimator,oscillation,tau\n")
        for z in range(len(tau)):
            fh.write(f"{z},{ind.node_estimator[z]!r},"
                     f"{ind.node_osc[z]!r},{tau[z]!r}\n")
