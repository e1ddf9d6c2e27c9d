"""Shape-regular baseline: isotropic adaptive refinement of the 2D cylinder.

The one-dimensional base problem is posed on the rectangle (0,1) x (0,Y)
meshed by triangles, with the weight y^alpha, P1 elements, the trace load on
the bottom edge, and local star problems in the P2 + bubble space.  Isotropic
bisection cannot match the anisotropy of the solution, which is the point:
the observed convergence rate is only #cells^(-s/2).
"""

import math
import time
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from . import forms, mesh as mesh_mod
from .afem import IterationRecord, MarkDecision, mark_dorfler


_TRACE_TOL = 1e-12


@lru_cache(maxsize=64)
def _gl(n):
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=64)
def _gj(n, alpha):
    """Nodes/weights on [0,1] absorbing the weight y^alpha."""
    xj, wj = roots_jacobi(n, 0.0, alpha)
    return 0.5 * (xj + 1.0), 0.5 ** (alpha + 1.0) * wj


def _y_rule(a, b, alpha, n_offset=24, n_touch=8):
    """Nodes/weights for integrals of y^alpha * (smooth) over [a, b].

    Exact for polynomials when a = 0 (Gauss-Jacobi absorbs the weight);
    for offset intervals plain Gauss-Legendre converges geometrically, with
    a dyadic split toward a when the interval is much wider than its offset.
    """
    if a <= _TRACE_TOL * max(1.0, b):
        x01, w01 = _gj(n_touch, alpha)
        return x01 * b, w01 * b ** (alpha + 1.0)
    x01, w01 = _gl(n_offset)
    if a >= 0.2 * (b - a):
        y = a + (b - a) * x01
        return y, (b - a) * w01 * y**alpha
    pieces = []
    lo = a
    while lo < b:
        hi = min(b, 2.0 * lo)
        if b - hi < 0.25 * (hi - lo):
            hi = b
        y = lo + (hi - lo) * x01
        pieces.append((y, (hi - lo) * w01 * y**alpha))
        lo = hi
    ys = np.concatenate([p[0] for p in pieces])
    ws = np.concatenate([p[1] for p in pieces])
    return ys, ws


def triangle_weighted_rule(verts, alpha, nx=4):
    """Quadrature for y^alpha integrals over one triangle (slab decomposition)."""
    v = np.asarray(verts, dtype=float)
    order = np.argsort(v[:, 1])
    v0, v1, v2 = v[order]
    gx, gw = _gl(nx)
    pts, wts = [], []
    for (ya, yb), (eL, eR) in (((v0[1], v1[1]), ((v0, v1), (v0, v2))),
                               ((v1[1], v2[1]), ((v1, v2), (v0, v2)))):
        if yb - ya <= _TRACE_TOL * max(1.0, abs(yb)):
            continue
        yq, yw = _y_rule(ya, yb, alpha)
        xs = np.empty((2, yq.size))
        for col, (p, q) in enumerate((eL, eR)):
            t = (yq - p[1]) / (q[1] - p[1])
            xs[col] = p[0] + t * (q[0] - p[0])
        xl = xs.min(axis=0)
        width = xs.max(axis=0) - xl
        xq = xl[:, None] + width[:, None] * gx[None, :]
        ww = (width * yw)[:, None] * gw[None, :]
        pts.append(np.stack([xq.ravel(), np.repeat(yq, gx.size)], axis=1))
        wts.append(ww.ravel())
    return np.concatenate(pts), np.concatenate(wts)


def weighted_measure(verts, alpha):
    """Integral of y^alpha over one triangle, via the slab rule with nx=1."""
    pts, wts = triangle_weighted_rule(verts, alpha, nx=1)
    return float(wts.sum())


class CylinderSection:
    """Mesh and dof bookkeeping of the rectangle (0,1) x (0, Y)."""

    def __init__(self, base, Y):
        self.base = base
        self.Y = Y
        ys = base.vertices[:, 1]
        boundary = base.boundary_vertex_mask()
        on_trace = np.abs(ys) <= _TRACE_TOL
        self.dirichlet = boundary & ~(on_trace & (base.vertices[:, 0] > 0)
                                      & (base.vertices[:, 0] < 1))
        self.free = np.nonzero(~self.dirichlet)[0]
        self.trace_edges = self._find_trace_edges()

    def _find_trace_edges(self):
        edges = set()
        ys = self.base.vertices[:, 1]
        for e, tri in enumerate(self.base.elements):
            for i in range(3):
                u, v = int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])
                if u > v:
                    u, v = v, u
                if abs(ys[u]) <= _TRACE_TOL and abs(ys[v]) <= _TRACE_TOL:
                    edges.add((u, v, e))
        return sorted(edges)


def build_section(Y, h0):
    nx = max(1, math.ceil(1.0 / h0))
    ny = max(1, math.ceil(Y / h0))
    coords_x = np.linspace(0.0, 1.0, nx + 1)
    coords_y = np.linspace(0.0, Y, ny + 1)
    verts = np.array([(x, y) for y in coords_y for x in coords_x])
    elems, refs = [], []

    def vid(i, j):
        return j * (nx + 1) + i

    for j in range(ny):
        for i in range(nx):
            p00, p10 = vid(i, j), vid(i + 1, j)
            p01, p11 = vid(i, j + 1), vid(i + 1, j + 1)
            elems.append((p00, p10, p11))
            refs.append(1)
            elems.append((p00, p11, p01))
            refs.append(2)
    base = mesh_mod.BaseMesh(2, verts, np.array(elems), np.array(refs))
    return CylinderSection(base, Y)


def element_rules(base, alpha):
    """Weighted quadrature rule of every triangle (reused by all assemblies)."""
    return [triangle_weighted_rule(base.vertices[base.elements[e]], alpha)
            for e in range(base.n_elements)]


def assemble_section(sec, params, f, load_degree=4, rules=None):
    base = sec.base
    ne = base.n_elements
    grads = _p1_grads(base)
    if rules is None:
        rules = element_rules(base, params.alpha)
    wmeas = np.array([float(w.sum()) for _, w in rules])
    k_loc = np.einsum("eik,ejk,e->eij", grads, grads, wmeas)
    rows = np.repeat(base.elements, 3, axis=1).ravel()
    cols = np.tile(base.elements, (1, 3)).ravel()
    nv = base.n_vertices
    A = sp.coo_matrix((k_loc.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    b = np.zeros(nv)
    gx, gw = leggauss((load_degree + 2) // 2)
    for (u, v, _e) in sec.trace_edges:
        xu, xv = base.vertices[u, 0], base.vertices[v, 0]
        xm = 0.5 * (xv - xu) * (gx + 1.0) + xu
        fv = f(np.stack([xm, np.zeros_like(xm)], axis=1)[:, :1])
        w = 0.5 * abs(xv - xu) * gw
        lam = (xm - xu) / (xv - xu)
        b[u] += params.ds * float((w * fv * (1.0 - lam)).sum())
        b[v] += params.ds * float((w * fv * lam).sum())
    free = sec.free
    return A[free][:, free].tocsc(), b[free], wmeas, grads


def _p1_grads(base):
    from .system import _p1_grads_2d
    return _p1_grads_2d(base.vertices[base.elements])


# ---------------------------------------------------------------------------
# star estimator on shape-regular patches

_P2B_VALS, _P2B_GRADS = forms.enriched_basis_2d("bubble")


def _element_star_blocks(base, rules, vals, grads):
    """Per-element P2+bubble stiffness blocks and residual vectors.

    Elements are bucketed by rule size so the quadrature contractions run
    batched; the star assembly afterwards is pure gather-add.
    """
    ne = base.n_elements
    elem_k = np.empty((ne, 7, 7))
    elem_r = np.empty((ne, 7))
    verts = base.vertices[base.elements]
    jac = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]],
                   axis=2)
    buckets = {}
    for e, (pts, wts) in enumerate(rules):
        buckets.setdefault(len(wts), []).append(e)
    gv = np.einsum("ei,eid->ed", vals[base.elements], grads)
    for npts, ids in buckets.items():
        ids = np.asarray(ids)
        pts = np.stack([rules[e][0] for e in ids])          # (nb, npts, 2)
        wts = np.stack([rules[e][1] for e in ids])
        jb = jac[ids]
        lam12 = np.linalg.solve(jb, np.swapaxes(pts - verts[ids, 0:1], 1, 2))
        lam12 = np.swapaxes(lam12, 1, 2)                    # (nb, npts, 2)
        lam = (1.0 - lam12[..., 0] - lam12[..., 1], lam12[..., 0],
               lam12[..., 1])
        d1, d2 = _P2B_GRADS(lam)
        gref = np.stack([np.stack(d1, axis=2), np.stack(d2, axis=2)], axis=3)
        inv_j = np.linalg.inv(jb)
        gphys = np.einsum("npbd,nde->npbe", gref, inv_j)
        sw = np.sqrt(wts)
        # contract quadrature points and gradient components via one matmul
        h = (gphys * sw[:, :, None, None]).transpose(0, 1, 3, 2)
        x = np.ascontiguousarray(h).reshape(len(ids), npts * 2, 7)
        elem_k[ids] = np.swapaxes(x, 1, 2) @ x
        hv = (gv[ids][:, None, :] * sw[:, :, None]).reshape(len(ids),
                                                            npts * 2, 1)
        elem_r[ids] = -(np.swapaxes(x, 1, 2) @ hv)[:, :, 0]
    return elem_k, elem_r


def _estimate_section(sec, vals, f, params, data_degree=7, rules=None):
    base = sec.base
    nv = base.n_vertices
    adj = base.vertex_to_elements()
    elements = base.elements
    verts_all = base.vertices
    grads = _p1_grads(base)
    ys = verts_all[:, 1]
    if rules is None:
        rules = element_rules(base, params.alpha)
    elem_k, elem_r = _element_star_blocks(base, rules, vals, grads)

    # per-trace-edge data loads against the P2+bubble traces
    gq, gw = leggauss((data_degree + 2) // 2)
    trace_load = {}
    node_trace = {}
    for (u, v, e) in sec.trace_edges:
        node_trace.setdefault(u, []).append((u, v))
        node_trace.setdefault(v, []).append((u, v))
    for (u, v, e) in sec.trace_edges:
        tri = elements[e]
        xu, xv = verts_all[u, 0], verts_all[v, 0]
        xm = 0.5 * (xv - xu) * (gq + 1.0) + xu
        w = 0.5 * abs(xv - xu) * gw
        fv = f(xm.reshape(-1, 1))
        tv = verts_all[tri]
        jac = np.stack([tv[1] - tv[0], tv[2] - tv[0]], axis=1)
        p2d = np.stack([xm, np.zeros_like(xm)], axis=1)
        lam12 = np.linalg.solve(jac, (p2d - tv[0]).T).T
        lam = (1.0 - lam12[:, 0] - lam12[:, 1], lam12[:, 0], lam12[:, 1])
        basis = np.stack(_P2B_VALS(lam), axis=1)
        trace_load[(u, v)] = (e, params.ds * np.einsum("p,pi,p->i", w,
                                                       basis, fv))

    elem_lists = [tuple(int(t) for t in tri) for tri in elements]
    on_trace_v = np.abs(ys) <= _TRACE_TOL
    dirichlet = sec.dirichlet
    est = np.zeros(nv)
    for z in range(nv):
        elems = adj[z]
        edge_count = {}
        for e in elems:
            tri = elem_lists[e]
            for i in range(3):
                u, v = tri[(i + 1) % 3], tri[(i + 2) % 3]
                if z == u or z == v:
                    k = (u, v) if u < v else (v, u)
                    edge_count[k] = edge_count.get(k, 0) + 1
        center_dof = -1
        ndof = 0
        if not dirichlet[z]:
            center_dof = 0
            ndof = 1
        edge_dof = {}
        for k in sorted(edge_count):
            if edge_count[k] == 2 or (on_trace_v[k[0]] and on_trace_v[k[1]]):
                edge_dof[k] = ndof
                ndof += 1
        bubble_base = ndof
        ndof += len(elems)
        a_loc = np.zeros((ndof, ndof))
        b_loc = np.zeros(ndof)
        loc_maps = {}
        for n_e, e in enumerate(elems):
            tri = elem_lists[e]
            loc_ids = [-1] * 7
            for i in range(3):
                if tri[i] == z and center_dof >= 0:
                    loc_ids[i] = center_dof
                u, v = tri[(i + 1) % 3], tri[(i + 2) % 3]
                k = (u, v) if u < v else (v, u)
                d = edge_dof.get(k)
                if d is not None:
                    loc_ids[3 + i] = d
            loc_ids[6] = bubble_base + n_e
            loc_maps[int(e)] = loc_ids
            li = [i for i, j in enumerate(loc_ids) if j >= 0]
            lj = np.array([j for j in loc_ids if j >= 0])
            a_loc[lj[:, None], lj[None, :]] += elem_k[e][li][:, li]
            b_loc[lj] += elem_r[e][li]
        for (u, v) in node_trace.get(z, ()):
            e, load = trace_load[(u, v)]
            loc_ids = loc_maps[e]
            for i, j in enumerate(loc_ids):
                if j >= 0:
                    b_loc[j] += load[i]
        eta = np.linalg.solve(a_loc, b_loc)
        est[z] = math.sqrt(max(0.0, float(eta @ b_loc)))

    # data oscillation lives on the trace mesh
    osc = np.zeros(nv)
    osc_edge = {}
    for (u, v, _e) in sec.trace_edges:
        xu, xv = verts_all[u, 0], verts_all[v, 0]
        xm = 0.5 * (xv - xu) * (gq + 1.0) + xu
        w = 0.5 * abs(xv - xu) * gw
        fv = f(xm.reshape(-1, 1))
        mean = float((w * fv).sum() / w.sum())
        osc_edge[(u, v)] = (abs(xv - xu), float((w * (fv - mean) ** 2).sum()))
    for z in range(nv):
        touching = [osc_edge[(u, v)] for (u, v) in osc_edge
                    if z in (u, v)]
        if touching:
            hz = min(t[0] for t in touching)
            osc[z] = math.sqrt(params.ds) * hz**params.s * math.sqrt(
                sum(t[1] for t in touching))
    return est, osc, osc_edge


def error_identity(sec, vals, f, u_exact, params, degree=7):
    gq, gw = leggauss((degree + 2) // 2)
    total = 0.0
    verts = sec.base.vertices
    for (u, v, _e) in sec.trace_edges:
        xu, xv = verts[u, 0], verts[v, 0]
        xm = 0.5 * (xv - xu) * (gq + 1.0) + xu
        w = 0.5 * abs(xv - xu) * gw
        lam = (xm - xu) / (xv - xu)
        tr = (1.0 - lam) * vals[u] + lam * vals[v]
        total += float((w * f(xm.reshape(-1, 1))
                        * (u_exact(xm.reshape(-1, 1)) - tr)).sum())
    return math.sqrt(max(0.0, params.ds * total))


def run_isotropic(config):
    """Adaptive loop of the shape-regular baseline; returns IterationRecords."""
    params = forms.FractionalParams.from_order(config.s)
    Y = 1.0 + math.log(config.dof_budget) / 3.0
    sec = build_section(Y, config.seed_h)
    records = []
    for it in range(config.max_iterations):
        t0 = time.perf_counter()
        rules = element_rules(sec.base, params.alpha)
        A, b, wmeas, grads = assemble_section(sec, params, config.f,
                                              rules=rules)
        vals = np.zeros(sec.base.n_vertices)
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A",
                       options=dict(SymmetricMode=True))
        vals[sec.free] = lu.solve(b)
        est, osc, osc_edge = _estimate_section(sec, vals, config.f, params,
                                               rules=rules)
        tau = np.sqrt(est**2 + osc**2)
        err = error_identity(sec, vals, config.f, config.u_exact, params)
        wall = (time.perf_counter() - t0) * 1e3
        est_tot = float(np.sqrt((est**2).sum()))
        osc_tot = float(np.sqrt((osc**2).sum()))
        tau_tot = float(np.hypot(est_tot, osc_tot))
        base = sec.base
        ys = base.vertices[:, 1]
        touch = (np.abs(ys[base.elements]) <= _TRACE_TOL).any(axis=1)
        h = base.element_diameters()
        yext = ys[base.elements].max(axis=1) - ys[base.elements].min(axis=1)
        aspect = float((h[touch] / yext[touch]).mean()) if touch.any() else 1.0
        records.append(IterationRecord(
            iter=it, n_base_elems=len(sec.trace_edges),
            n_cyl_cells=base.n_elements, dofs=len(sec.free), M=0, Y=Y,
            error=err, estimator=est_tot, oscillation=osc_tot, tau=tau_tot,
            effectivity=tau_tot / err if err > 0 else math.nan,
            aspect_bottom_mean=aspect, mesh_cond_worst=0.0,
            solver_iters=0, wall_ms=wall))
        decision = mark_dorfler(tau, config.theta)
        if decision.converged:
            return records, "converged"
        adjacency = base.vertex_to_elements()
        marked = sorted(set(
            int(e) for z in decision.indices for e in adjacency[z]))
        new_base = mesh_mod.bisect(base, marked)
        if new_base.n_elements > config.dof_budget:
            return records, "budget"
        sec = CylinderSection(new_base, Y)
    return records, "cap"
