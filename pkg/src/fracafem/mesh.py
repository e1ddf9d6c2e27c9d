"""Simplicial base meshes, graded vertical partitions, and their tensor product.

Meshes are immutable: refinement returns a new mesh carrying ancestry
information (parent elements and parent edges of new vertices) so callers can
prolong discrete fields between nested meshes.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

_UID = itertools.count(1)


def _edge_key(u, v):
    return (u, v) if u < v else (v, u)


class BaseMesh:
    """Conforming mesh of intervals (dim 1) or triangles (dim 2).

    Triangles carry a refinement-edge index in {0, 1, 2}: edge ``r`` is the
    edge opposite local vertex ``r``, and newest-vertex bisection always
    splits that edge.
    """

    def __init__(self, dim, vertices, elements, refedge=None, parent=None,
                 vertex_parents=None, ancestry=(), parent_mesh=None):
        self.dim = dim
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        if self.vertices.ndim == 1:
            self.vertices = self.vertices.reshape(-1, 1)
        ne = self.elements.shape[0]
        self.refedge = (np.zeros(ne, dtype=np.int64) if refedge is None
                        else np.ascontiguousarray(refedge, dtype=np.int64))
        # parent[i] = element id in the previous mesh, -1 for a root mesh
        self.parent = (np.full(ne, -1, dtype=np.int64) if parent is None
                       else np.ascontiguousarray(parent, dtype=np.int64))
        # vertex_parents[i] = the two endpoints of the parent edge whose
        # midpoint vertex i is; (i, i) for inherited vertices
        if vertex_parents is None:
            nv = self.vertices.shape[0]
            vertex_parents = np.stack([np.arange(nv), np.arange(nv)], axis=1)
        self.vertex_parents = np.ascontiguousarray(vertex_parents, dtype=np.int64)
        self.uid = next(_UID)
        self.ancestry = tuple(ancestry)
        self.parent_mesh = parent_mesh
        self._cache = {}

    # -- sizes ------------------------------------------------------------
    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    # -- derived geometry (cached) ----------------------------------------
    def element_diameters(self):
        h = self._cache.get("h")
        if h is None:
            v = self.vertices[self.elements]
            if self.dim == 1:
                h = np.abs(v[:, 1, 0] - v[:, 0, 0])
            else:
                e0 = np.linalg.norm(v[:, 1] - v[:, 2], axis=1)
                e1 = np.linalg.norm(v[:, 2] - v[:, 0], axis=1)
                e2 = np.linalg.norm(v[:, 0] - v[:, 1], axis=1)
                h = np.maximum(e0, np.maximum(e1, e2))
            self._cache["h"] = h
        return h

    def element_measures(self):
        m = self._cache.get("measure")
        if m is None:
            v = self.vertices[self.elements]
            if self.dim == 1:
                m = np.abs(v[:, 1, 0] - v[:, 0, 0])
            else:
                d1 = v[:, 1] - v[:, 0]
                d2 = v[:, 2] - v[:, 0]
                m = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
            self._cache["measure"] = m
        return m

    def boundary_vertex_mask(self):
        mask = self._cache.get("boundary")
        if mask is None:
            mask = np.zeros(self.n_vertices, dtype=bool)
            if self.dim == 1:
                counts = np.bincount(self.elements.ravel(),
                                     minlength=self.n_vertices)
                mask[counts == 1] = True
            else:
                edges = {}
                for tri in self.elements:
                    for i in range(3):
                        k = _edge_key(tri[(i + 1) % 3], tri[(i + 2) % 3])
                        edges[k] = edges.get(k, 0) + 1
                for (u, v), cnt in edges.items():
                    if cnt == 1:
                        mask[u] = True
                        mask[v] = True
            self._cache["boundary"] = mask
        return mask

    def interior_vertices(self):
        return np.nonzero(~self.boundary_vertex_mask())[0]

    def vertex_to_elements(self):
        adj = self._cache.get("v2e")
        if adj is None:
            adj = [[] for _ in range(self.n_vertices)]
            for e, verts in enumerate(self.elements):
                for v in verts:
                    adj[v].append(e)
            adj = [np.asarray(a, dtype=np.int64) for a in adj]
            self._cache["v2e"] = adj
        return adj

    def edge_counts(self):
        """Map edge key -> number of adjacent elements (dim 2 only)."""
        cnt = self._cache.get("edge_counts")
        if cnt is None:
            cnt = {}
            for tri in self.elements:
                for i in range(3):
                    k = _edge_key(tri[(i + 1) % 3], tri[(i + 2) % 3])
                    cnt[k] = cnt.get(k, 0) + 1
            self._cache["edge_counts"] = cnt
        return cnt

    def min_angle(self):
        """Smallest interior angle over all triangles (radians)."""
        if self.dim != 2:
            raise ValueError("angles are defined for triangle meshes only")
        v = self.vertices[self.elements]
        angles = []
        for i in range(3):
            a = v[:, (i + 1) % 3] - v[:, i]
            b = v[:, (i + 2) % 3] - v[:, i]
            cosang = np.sum(a * b, axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return float(np.min(np.stack(angles)))

    def angle_triples(self):
        v = self.vertices[self.elements]
        out = []
        for i in range(3):
            a = v[:, (i + 1) % 3] - v[:, i]
            b = v[:, (i + 2) % 3] - v[:, i]
            cosang = np.sum(a * b, axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            out.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return np.sort(np.stack(out, axis=1), axis=1)


@dataclass(frozen=True)
class YPartition:
    """Graded partition y_k = (k/M)^gamma * Y of [0, Y]."""

    M: int
    Y: float
    gamma: float
    nodes: np.ndarray

    @property
    def h_top(self):
        """Largest vertical mesh size, attained at the top for gamma >= 1."""
        return float(self.nodes[-1] - self.nodes[-2])

    def interval(self, k):
        return float(self.nodes[k]), float(self.nodes[k + 1])

    def widths(self):
        return np.diff(self.nodes)


def build_graded_partition(M, Y, gamma):
    """Vertical partition concentrated near y = 0 by the power-law grading."""
    if not (isinstance(M, (int, np.integer)) and M >= 1):
        raise ValueError(f"M must be a positive integer, got {M!r}")
    if not (math.isfinite(Y) and Y > 0.0):
        raise ValueError(f"truncation height must be positive, got {Y!r}")
    if not (math.isfinite(gamma) and gamma >= 1.0):
        raise ValueError(f"grading exponent must be >= 1, got {gamma!r}")
    k = np.arange(M + 1, dtype=float)
    nodes = (k / M) ** gamma * Y
    nodes[0] = 0.0
    nodes[-1] = Y
    return YPartition(M=int(M), Y=float(Y), gamma=float(gamma), nodes=nodes)


def gamma_for(s, policy="default"):
    """Grading exponent: slightly above 3/(2s), or above 3/(1-|alpha|)."""
    if policy == "default":
        return 3.0 / (2.0 * s) + 0.1
    if policy == "strong":
        return 3.0 / (1.0 - abs(1.0 - 2.0 * s)) + 0.1
    raise ValueError(f"unknown gamma policy {policy!r}")


# ---------------------------------------------------------------------------
# domain constructors


def _grid_triangles(x0, x1, y0, y1, nx, ny, diag="ll"):
    """Structured triangulation of a rectangle; 'diag' picks the diagonal
    direction per cell ('ll' = lower-left to upper-right)."""
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    return xs, ys


def _cells_for(length, h):
    return max(1, math.ceil(length / h - 1e-9))


def build_base_mesh(domain, initial_h):
    """Uniform conforming mesh of a named domain with grid pitch <= initial_h.

    Refinement edges are the longest edges (the square diagonals), which for
    the L-shape are oriented toward the reentrant corner at the origin.
    """
    if not (math.isfinite(initial_h) and initial_h > 0.0):
        raise ValueError(f"mesh size must be positive, got {initial_h!r}")
    if domain == "unit_interval":
        n = _cells_for(1.0, initial_h)
        verts = np.linspace(0.0, 1.0, n + 1).reshape(-1, 1)
        elems = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
        return BaseMesh(1, verts, elems)
    if domain == "unit_square":
        return _square_mesh(0.0, 1.0, _cells_for(1.0, initial_h))
    if domain == "square_pm1":
        return _square_mesh(-1.0, 1.0, _cells_for(2.0, initial_h))
    if domain == "l_shape":
        return _l_shape_mesh(_cells_for(1.0, initial_h))
    raise ValueError(f"unknown domain tag {domain!r}")


def _square_mesh(lo, hi, n):
    coords = np.linspace(lo, hi, n + 1)
    verts = np.array([(x, y) for y in coords for x in coords])
    elems, refs = [], []

    def vid(i, j):
        return j * (n + 1) + i

    for j in range(n):
        for i in range(n):
            p00, p10 = vid(i, j), vid(i + 1, j)
            p01, p11 = vid(i, j + 1), vid(i + 1, j + 1)
            # diagonal p00-p11; refinement edge = the diagonal
            elems.append((p00, p10, p11))
            refs.append(1)
            elems.append((p00, p11, p01))
            refs.append(2)
    return BaseMesh(2, verts, np.array(elems), np.array(refs))


def _l_shape_mesh(n):
    # (-1,1)^2 minus the quadrant (0,1)x(-1,0); 2n cells across each axis
    coords = np.linspace(-1.0, 1.0, 2 * n + 1)
    index = {}
    verts = []

    def vid(i, j):
        key = (i, j)
        if key not in index:
            index[key] = len(verts)
            verts.append((coords[i], coords[j]))
        return index[key]

    elems, refs = [], []
    for j in range(2 * n):
        for i in range(2 * n):
            cx = 0.5 * (coords[i] + coords[i + 1])
            cy = 0.5 * (coords[j] + coords[j + 1])
            if cx > 0.0 and cy < 0.0:
                continue
            p00, p10 = vid(i, j), vid(i + 1, j)
            p01, p11 = vid(i, j + 1), vid(i + 1, j + 1)
            if cx < 0.0 and cy > 0.0:
                # upper-left quadrant: diagonal toward the origin has slope -1
                elems.append((p00, p10, p01))
                refs.append(0)
                elems.append((p11, p01, p10))
                refs.append(0)
            else:
                elems.append((p00, p10, p11))
                refs.append(1)
                elems.append((p00, p11, p01))
                refs.append(2)
    return BaseMesh(2, np.array(verts), np.array(elems), np.array(refs))


# ---------------------------------------------------------------------------
# newest-vertex bisection with conformity closure


def bisect(mesh, marked):
    """Bisect the marked elements, closing the mesh so it stays conforming.

    New vertices appear only at midpoints of parent edges.  The returned mesh
    records element parents and the parent edge of each new vertex.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if marked.size == 0:
        return mesh
    if np.any(marked < 0) or np.any(marked >= mesh.n_elements):
        raise ValueError("marked set contains invalid element ids")
    if mesh.dim == 1:
        return _bisect_1d(mesh, marked)
    return _bisect_2d(mesh, marked)


def _bisect_1d(mesh, marked):
    marked_set = set(marked.tolist())
    coords = list(mesh.vertices[:, 0])
    vparents = [(i, i) for i in range(mesh.n_vertices)]
    elems, parents = [], []
    for e, (a, b) in enumerate(mesh.elements):
        if e in marked_set:
            mid = len(coords)
            coords.append(0.5 * (coords[a] + coords[b]))
            vparents.append((int(a), int(b)))
            elems += [(a, mid), (mid, b)]
            parents += [e, e]
        else:
            elems.append((a, b))
            parents.append(e)
    return BaseMesh(1, np.array(coords).reshape(-1, 1), np.array(elems),
                    parent=np.array(parents),
                    vertex_parents=np.array(vparents),
                    ancestry=mesh.ancestry + (mesh.uid,), parent_mesh=mesh)


def _bisect_2d(mesh, marked):
    elements = mesh.elements
    refedge = mesh.refedge

    def ref_key(e):
        r = refedge[e]
        tri = elements[e]
        return _edge_key(tri[(r + 1) % 3], tri[(r + 2) % 3])

    elem_edges = [
        [_edge_key(tri[1], tri[2]), _edge_key(tri[2], tri[0]),
         _edge_key(tri[0], tri[1])]
        for tri in elements
    ]

    marked_edges = set(ref_key(e) for e in marked)
    # closure: any element with a marked edge must have its refinement edge
    # marked too, so that the bisection cascade terminates within the element
    changed = True
    while changed:
        changed = False
        for e in range(mesh.n_elements):
            rk = ref_key(e)
            if rk in marked_edges:
                continue
            if any(k in marked_edges for k in elem_edges[e]):
                marked_edges.add(rk)
                changed = True

    coords = list(map(tuple, mesh.vertices))
    vparents = [(i, i) for i in range(mesh.n_vertices)]
    midpoint = {}
    for (u, v) in sorted(marked_edges):
        midpoint[(u, v)] = len(coords)
        coords.append(tuple(0.5 * (mesh.vertices[u] + mesh.vertices[v])))
        vparents.append((u, v))

    new_elems, new_refs, parents = [], [], []

    def emit(tri, r, parent, depth):
        """Recursively bisect (tri, refedge r) while its refinement edge is marked."""
        p = tri[r]
        a = tri[(r + 1) % 3]
        b = tri[(r + 2) % 3]
        key = _edge_key(a, b)
        if key not in marked_edges:
            new_elems.append(tuple(tri))
            new_refs.append(r)
            parents.append(parent)
            return
        if depth > 2:
            raise RuntimeError("bisection cascade failed to terminate")
        m = midpoint[key]
        emit((m, p, a), 0, parent, depth + 1)
        emit((m, b, p), 0, parent, depth + 1)

    for e in range(mesh.n_elements):
        tri = tuple(int(v) for v in elements[e])
        emit(tri, int(refedge[e]), e, 0)

    return BaseMesh(2, np.array(coords), np.array(new_elems),
                    np.array(new_refs), parent=np.array(parents),
                    vertex_parents=np.array(vparents),
                    ancestry=mesh.ancestry + (mesh.uid,), parent_mesh=mesh)


def uniform_refine(mesh, rounds=1):
    for _ in range(rounds):
        mesh = bisect(mesh, range(mesh.n_elements))
    return mesh


# ---------------------------------------------------------------------------
# stars and the tensor-product cylinder


@dataclass
class Star:
    """Element patch of one base-mesh node and its vertical cylinder."""

    center: int
    element_ids: np.ndarray
    h_star: float

    @property
    def n_elements(self):
        return len(self.element_ids)

    def cylinder_cells(self, cyl):
        """Ids of the prism cells forming the cylindrical star."""
        M = cyl.ypart.M
        return (self.element_ids[:, None] * M + np.arange(M)[None, :]).ravel()


def star(mesh, node):
    if not (0 <= node < mesh.n_vertices):
        raise ValueError(f"vertex id {node} out of range")
    elems = mesh.vertex_to_elements()[node]
    h = mesh.element_diameters()
    return Star(center=int(node), element_ids=np.sort(elems),
                h_star=float(h[elems].min()))


def stars(mesh):
    h = mesh.element_diameters()
    adj = mesh.vertex_to_elements()
    return [Star(center=z, element_ids=np.sort(adj[z]),
                 h_star=float(h[adj[z]].min()))
            for z in range(mesh.n_vertices)]


class CylinderMesh:
    """Tensor product of a base mesh with a vertical partition.

    Tensor node (i, k) has flat index i * (M + 1) + k; prism cell (e, k) has
    flat index e * M + k.
    """

    def __init__(self, base, ypart):
        self.base = base
        self.ypart = ypart

    @property
    def n_cells(self):
        return self.base.n_elements * self.ypart.M

    @property
    def n_nodes(self):
        return self.base.n_vertices * (self.ypart.M + 1)

    def node_index(self, vertex, level):
        return vertex * (self.ypart.M + 1) + level

    def cell_index(self, element, layer):
        return element * self.ypart.M + layer

    def dirichlet_mask(self):
        """True at nodes on the lateral boundary or the top cap."""
        M = self.ypart.M
        mask = np.zeros((self.base.n_vertices, M + 1), dtype=bool)
        mask[self.base.boundary_vertex_mask(), :] = True
        mask[:, M] = True
        return mask.ravel()


def extrude(base, ypart):
    return CylinderMesh(base, ypart)


def check_mesh_condition(cyl, C_T):
    """Verify h_top <= C_T * h_star at every interior base node.

    Returns (satisfied, worst_node, worst_ratio) with ratio = h_top / h_star;
    vacuously satisfied when the base mesh has no interior nodes.
    """
    if not (C_T > 0.0):
        raise ValueError("C_T must be positive")
    h_top = cyl.ypart.h_top
    interior = cyl.base.interior_vertices()
    if interior.size == 0:
        return True, -1, 0.0
    h = cyl.base.element_diameters()
    adj = cyl.base.vertex_to_elements()
    h_star = np.array([h[adj[z]].min() for z in interior])
    ratios = h_top / h_star
    worst = int(np.argmax(ratios))
    worst_ratio = float(ratios[worst])
    return worst_ratio <= C_T, int(interior[worst]), worst_ratio


def aspect_ratio_stats(cyl):
    """Mean bottom-layer aspect ratio h_K / h_I and the global maximum."""
    h = cyl.base.element_diameters()
    widths = cyl.ypart.widths()
    bottom = h / widths[0]
    ratios_max = float(h.max() / widths.min())
    return {"bottom_layer_mean": float(bottom.mean()), "max": ratios_max}


# ---------------------------------------------------------------------------
# plain-text dump


def dump_mesh(mesh):
    """Serialize to the line format: header, vertex lines, element lines."""
    lines = [f"DIM {mesh.dim} NV {mesh.n_vertices} NE {mesh.n_elements}"]
    boundary = mesh.boundary_vertex_mask()
    for i in range(mesh.n_vertices):
        coords = " ".join(repr(float(c)) for c in mesh.vertices[i])
        lines.append(f"v {coords} {int(boundary[i])}")
    for e in range(mesh.n_elements):
        ids = " ".join(str(int(v)) for v in mesh.elements[e])
        lines.append(f"e {ids} {int(mesh.refedge[e])}")
    return "\n".join(lines) + "\n"


def parse_mesh(text):
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "DIM":
        raise ValueError("missing mesh header")
    dim, nv, ne = int(head[1]), int(head[3]), int(head[5])
    verts, elems, refs = [], [], []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:1 + dim]])
        elif parts[0] == "e":
            elems.append([int(x) for x in parts[1:2 + dim]])
            refs.append(int(parts[2 + dim]))
    if len(verts) != nv or len(elems) != ne:
        raise ValueError("mesh dump is inconsistent with its header")
    return BaseMesh(dim, np.array(verts), np.array(elems), np.array(refs))
