"""Weighted integration of |y|^alpha against polynomials and local element matrices.

Everything in the vertical direction is integrated in closed form through
``weighted_moment``; the horizontal direction uses exact formulas for affine
simplices or quadrature rules that are exact for the polynomial degree at
hand.  Intermediate sums run in extended precision so that cells far from
y = 0 (where the monomial expansion of the local bases cancels strongly) stay
accurate to ~1e-13.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .errors import DataError, GeometryError


@dataclass(frozen=True)
class FractionalParams:
    """Order s, weight exponent alpha = 1 - 2s and the normalization d_s."""

    s: float
    alpha: float
    ds: float

    @classmethod
    def from_order(cls, s: float) -> "FractionalParams":
        if not (0.0 < s < 1.0) or not math.isfinite(s):
            raise ValueError(f"order s must lie in (0, 1), got {s}")
        alpha = 1.0 - 2.0 * s
        ds = 2.0 ** (1.0 - 2.0 * s) * math.gamma(1.0 - s) / math.gamma(s)
        return cls(s=s, alpha=alpha, ds=ds)


def weighted_moment(a: float, b: float, alpha: float, k: int) -> float:
    """Integral of y^(alpha + k) over [a, b], exact.

    Finite for a = 0 because alpha + k + 1 > 0 whenever alpha > -1.
    """
    if not (alpha > -1.0 and math.isfinite(alpha)):
        raise ValueError(f"weight exponent must exceed -1, got {alpha}")
    if not (0.0 <= a < b) or not math.isfinite(b):
        raise ValueError(f"need 0 <= a < b, got a={a}, b={b}")
    if k < 0:
        raise ValueError(f"moment order must be >= 0, got {k}")
    p = np.longdouble(alpha) + k + 1.0
    hi = np.power(np.longdouble(b), p)
    lo = np.power(np.longdouble(a), p) if a > 0.0 else np.longdouble(0.0)
    return float((hi - lo) / p)


def _moments(a, b, alpha, kmax):
    """Moments 0..kmax on [a, b] in extended precision."""
    ks = np.arange(kmax + 1, dtype=np.longdouble)
    p = np.longdouble(alpha) + ks + 1.0
    hi = np.power(np.longdouble(b), p)
    lo = np.power(np.longdouble(a), p) if a > 0.0 else np.zeros_like(p)
    return (hi - lo) / p


def weighted_poly_gram(a, b, alpha, coeffs, dcoeffs=None):
    """Gram matrices of polynomial bases on [a, b] against the weight y^alpha.

    ``coeffs`` is a list of monomial coefficient arrays (ascending powers of
    the global variable y).  Returns (mass, stiffness) where stiffness uses the
    derivatives; pass ``dcoeffs`` to override the differentiated coefficients.
    """
    coeffs = [np.asarray(c, dtype=np.longdouble) for c in coeffs]
    if dcoeffs is None:
        dcoeffs = [np.polynomial.polynomial.polyder(c) for c in coeffs]
    else:
        dcoeffs = [np.asarray(c, dtype=np.longdouble) for c in dcoeffs]
    deg = max(len(c) for c in coeffs) - 1
    mom = _moments(a, b, alpha, 2 * deg)
    n = len(coeffs)
    mass = np.empty((n, n))
    stiff = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            cm = np.polynomial.polynomial.polymul(coeffs[i], coeffs[j])
            mass[i, j] = mass[j, i] = float(np.dot(cm, mom[: len(cm)]))
            cs = np.polynomial.polynomial.polymul(dcoeffs[i], dcoeffs[j])
            stiff[i, j] = stiff[j, i] = float(np.dot(cs, mom[: len(cs)]))
    return mass, stiff


def hat_coeffs(a, b):
    """P1 nodal basis on [a, b] as global monomial coefficients."""
    h = b - a
    return [np.array([b / h, -1.0 / h]), np.array([-a / h, 1.0 / h])]


def quad_coeffs(a, b):
    """Quadratic Lagrange basis (nodes a, midpoint, b) on [a, b]."""
    h = b - a
    c = 0.5 * (a + b)
    # 2(y-c)(y-b)/h^2, -4(y-a)(y-b)/h^2, 2(y-a)(y-c)/h^2
    def prod(r1, r2, scale):
        return scale * np.array([r1 * r2, -(r1 + r2), 1.0]) / h**2

    return [prod(c, b, 2.0), prod(a, b, -4.0), prod(a, c, 2.0)]


def _interval_block(a, b, alpha, coeffs_a, coeffs_b):
    """Weighted mass/stiffness coupling blocks between two local bases."""
    ca = [np.asarray(c, dtype=np.longdouble) for c in coeffs_a]
    cb = [np.asarray(c, dtype=np.longdouble) for c in coeffs_b]
    da = [np.polynomial.polynomial.polyder(c) for c in ca]
    db = [np.polynomial.polynomial.polyder(c) for c in cb]
    deg = max(len(c) for c in ca) + max(len(c) for c in cb) - 2
    mom = _moments(a, b, alpha, deg)
    m = np.empty((len(ca), len(cb)))
    k = np.empty((len(ca), len(cb)))
    for i, ci in enumerate(ca):
        for j, cj in enumerate(cb):
            cm = np.polynomial.polynomial.polymul(ci, cj)
            m[i, j] = float(np.dot(cm, mom[: len(cm)]))
            cs = np.polynomial.polynomial.polymul(da[i], db[j])
            k[i, j] = float(np.dot(cs, mom[: len(cs)]))
    return m, k


def p1_vertical_grams(ypart, alpha):
    """Weighted mass/stiffness of the P1 hats over the whole partition."""
    M = ypart.M
    g0 = np.zeros((M + 1, M + 1))
    g1 = np.zeros((M + 1, M + 1))
    for k in range(M):
        a, b = ypart.interval(k)
        m, s = _interval_block(a, b, alpha, hat_coeffs(a, b), hat_coeffs(a, b))
        g0[k:k + 2, k:k + 2] += m
        g1[k:k + 2, k:k + 2] += s
    return g0, g1


def quadratic_vertical_grams(ypart, alpha):
    """Weighted mass/stiffness of the C0 quadratic space over the partition.

    Node ordering: vertex k -> 2k, midpoint of interval k -> 2k + 1.
    """
    M = ypart.M
    n = 2 * M + 1
    g0 = np.zeros((n, n))
    g1 = np.zeros((n, n))
    for k in range(M):
        a, b = ypart.interval(k)
        qc = quad_coeffs(a, b)
        m, s = _interval_block(a, b, alpha, qc, qc)
        sl = slice(2 * k, 2 * k + 3)
        g0[sl, sl] += m
        g1[sl, sl] += s
    return g0, g1


def cross_vertical_grams(ypart, alpha):
    """Couplings (quadratic space) x (P1 space) under the weight, full index sets."""
    M = ypart.M
    c0 = np.zeros((2 * M + 1, M + 1))
    c1 = np.zeros((2 * M + 1, M + 1))
    for k in range(M):
        a, b = ypart.interval(k)
        m, s = _interval_block(a, b, alpha, quad_coeffs(a, b), hat_coeffs(a, b))
        c0[2 * k:2 * k + 3, k:k + 2] += m
        c1[2 * k:2 * k + 3, k:k + 2] += s
    return c0, c1


# ---------------------------------------------------------------------------
# quadrature rules on reference simplices


@lru_cache(maxsize=None)
def simplex_quadrature(dim: int, degree: int):
    """Points and weights on the reference simplex, exact for ``degree``.

    Reference domains: [0, 1] for dim 1, the triangle (0,0)-(1,0)-(0,1) for
    dim 2.  Weights sum to the reference measure.  The triangle rule is a
    collapsed Gauss-Jacobi x Gauss-Legendre product, so all weights are
    positive at any degree.
    """
    npts = (degree + 2) // 2
    x, w = np.polynomial.legendre.leggauss(npts)
    x01 = 0.5 * (x + 1.0)
    w01 = 0.5 * w
    if dim == 1:
        return x01.reshape(-1, 1), w01
    if dim == 2:
        xj, wj = roots_jacobi(npts, 0.0, 1.0)
        u = 0.5 * (xj + 1.0)
        wu = 0.25 * wj
        U, V = np.meshgrid(u, x01, indexing="ij")
        WU, WV = np.meshgrid(wu, w01, indexing="ij")
        pts = np.stack([(U * (1.0 - V)).ravel(), (U * V).ravel()], axis=1)
        return pts, (WU * WV).ravel()
    raise ValueError(f"unsupported simplex dimension {dim}")


def map_to_simplex(vertices, ref_pts):
    """Map reference points into the physical simplex; returns (points, measure)."""
    v = np.asarray(vertices, dtype=float)
    dim = ref_pts.shape[1]
    jac = (v[1:] - v[0]).T  # (gdim, dim)
    pts = v[0] + ref_pts @ jac.T
    det = np.linalg.det(jac) if dim == jac.shape[0] else None
    if det is None:
        raise GeometryError("simplex dimension mismatch")
    vol = abs(det) / math.factorial(dim)
    if vol == 0.0:
        raise GeometryError(f"degenerate simplex with vertices {v.tolist()}")
    return pts, abs(det)


# ---------------------------------------------------------------------------
# simplex P1 geometry helpers


def simplex_measure(vertices):
    v = np.asarray(vertices, dtype=float)
    if v.shape[0] == 2:
        return abs(v[1, 0] - v[0, 0]) if v.ndim == 2 else abs(v[1] - v[0])
    det = (v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1]) - (v[1, 1] - v[0, 1]) * (
        v[2, 0] - v[0, 0]
    )
    return 0.5 * abs(det)


def p1_gradients(vertices):
    """Constant gradients of the P1 hats on an affine simplex."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim == 1 or v.shape[1] == 1:
        h = float(v.ravel()[1] - v.ravel()[0])
        if h == 0.0:
            raise GeometryError("zero-length interval")
        return np.array([[-1.0 / h], [1.0 / h]])
    jac = (v[1:] - v[0]).T
    det = np.linalg.det(jac)
    if det == 0.0:
        raise GeometryError(f"degenerate triangle {v.tolist()}")
    inv_t = np.linalg.inv(jac).T
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return ref @ inv_t.T


def p1_stiffness_mass(vertices):
    """Exact P1 stiffness and consistent mass on one simplex."""
    grads = p1_gradients(vertices)
    vol = simplex_measure(vertices)
    k = vol * grads @ grads.T
    nv = grads.shape[0]
    m = vol / ((nv) * (nv + 1)) * (np.ones((nv, nv)) + np.eye(nv))
    return k, m


# ---------------------------------------------------------------------------
# enriched horizontal bases (values/gradients at reference points)

_SQ3 = math.sqrt(3.0)


def enriched_basis_1d(space_tag):
    """Lagrange P2 on the reference interval in terms of (lam0, lam1).

    'bubble' appends the odd cubic bubble; 'p2' and 'q2' coincide on an
    interval.  Ordering: left vertex, right vertex, midpoint.
    """
    funcs = [
        lambda l0, l1: l0 * (2.0 * l0 - 1.0),
        lambda l0, l1: l1 * (2.0 * l1 - 1.0),
        lambda l0, l1: 4.0 * l0 * l1,
    ]
    # derivative with respect to lam1 (lam0 = 1 - lam1)
    derivs = [
        lambda l0, l1: -(4.0 * l0 - 1.0),
        lambda l0, l1: 4.0 * l1 - 1.0,
        lambda l0, l1: 4.0 * (l0 - l1),
    ]
    if space_tag == "bubble":
        funcs.append(lambda l0, l1: 6.0 * _SQ3 * l0 * l1 * (l0 - l1))
        derivs.append(lambda l0, l1: 6.0 * _SQ3 * (l0**2 - 4.0 * l0 * l1 + l1**2))
    elif space_tag not in ("p2", "q2"):
        raise ValueError(f"unknown space tag {space_tag!r}")
    return funcs, derivs


def constant_kernel_vector(dim, space_tag, n_y):
    """Coefficients of the constant function in the enriched prism basis."""
    nb = {1: 3, 2: 6}[dim] + (1 if space_tag == "bubble" else 0)
    cx = np.ones(nb)
    if space_tag == "bubble":
        cx[-1] = 0.0
    return np.kron(cx, np.ones(n_y))


def enriched_basis_2d(space_tag):
    """P2 (optionally + cubic bubble) in barycentric coordinates on a triangle.

    Ordering: three vertex functions, three edge functions (edge i is opposite
    vertex i), then the bubble.  Returns (values, gradients wrt (lam1, lam2)).
    """
    if space_tag == "q2":
        raise ValueError("Q2 horizontal spaces need quadrilateral cells; "
                         "this build is simplicial only")
    if space_tag not in ("bubble", "p2"):
        raise ValueError(f"unknown space tag {space_tag!r}")

    def vals(lam):
        l0, l1, l2 = lam
        out = [
            l0 * (2.0 * l0 - 1.0),
            l1 * (2.0 * l1 - 1.0),
            l2 * (2.0 * l2 - 1.0),
            4.0 * l1 * l2,
            4.0 * l0 * l2,
            4.0 * l0 * l1,
        ]
        if space_tag == "bubble":
            out.append(27.0 * l0 * l1 * l2)
        return out

    def grads(lam):
        # d/d(l1), d/d(l2) with l0 = 1 - l1 - l2
        l0, l1, l2 = lam
        one = np.ones_like(l1)
        d1 = [
            -(4.0 * l0 - 1.0) * one,
            (4.0 * l1 - 1.0) * one,
            0.0 * one,
            4.0 * l2,
            -4.0 * l2,
            4.0 * (l0 - l1),
        ]
        d2 = [
            -(4.0 * l0 - 1.0) * one,
            0.0 * one,
            (4.0 * l2 - 1.0) * one,
            4.0 * l1,
            4.0 * (l0 - l2),
            -4.0 * l1,
        ]
        if space_tag == "bubble":
            d1.append(27.0 * l2 * (l0 - l1))
            d2.append(27.0 * l1 * (l0 - l2))
        return d1, d2

    return vals, grads


def enriched_gram_x(vertices, space_tag):
    """Exact stiffness/mass of the enriched horizontal basis on one simplex.

    Also returns the rectangular couplings with the P1 hats, needed when the
    residual of a P1 field is tested against the enriched space.
    """
    v = np.asarray(vertices, dtype=float)
    dim = 1 if (v.ndim == 1 or v.shape[1] == 1) else 2
    ref_pts, ref_w = simplex_quadrature(dim, 8)
    if dim == 1:
        a, b = float(v[0]), float(v[1])
        h = b - a
        if h <= 0:
            raise GeometryError("interval vertices must be increasing")
        l1 = ref_pts[:, 0]
        l0 = 1.0 - l1
        funcs, derivs = enriched_basis_1d(space_tag)
        vals = np.stack([f(l0, l1) for f in funcs], axis=1)         # (np, nb)
        dval = np.stack([d(l0, l1) for d in derivs], axis=1) / h    # d/dx
        w = ref_w * h
        p1_vals = np.stack([l0, l1], axis=1)
        p1_grad = np.stack([np.full_like(l1, -1.0 / h), np.full_like(l1, 1.0 / h)],
                           axis=1)
        kx = dval.T @ (dval * w[:, None])
        mx = vals.T @ (vals * w[:, None])
        kxc = dval.T @ (p1_grad * w[:, None])
        mxc = vals.T @ (p1_vals * w[:, None])
        return kx, mx, kxc, mxc
    # triangles
    jac = (v[1:] - v[0]).T
    det = np.linalg.det(jac)
    if det == 0.0:
        raise GeometryError(f"degenerate triangle {v.tolist()}")
    inv_t = np.linalg.inv(jac).T
    l1 = ref_pts[:, 0]
    l2 = ref_pts[:, 1]
    lam = (1.0 - l1 - l2, l1, l2)
    vals_f, grads_f = enriched_basis_2d(space_tag)
    vals = np.stack(vals_f(lam), axis=1)
    d1, d2 = grads_f(lam)
    gref = np.stack([np.stack(d1, axis=1), np.stack(d2, axis=1)], axis=2)
    gphys = gref @ inv_t.T                                          # (np, nb, 2)
    w = ref_w * abs(det)
    p1_vals = np.stack(lam, axis=1)
    p1_grad = p1_gradients(v)                                       # (3, 2)
    kx = np.einsum("pid,pjd,p->ij", gphys, gphys, w)
    mx = vals.T @ (vals * w[:, None])
    kxc = np.einsum("pid,jd,p->ij", gphys, p1_grad, w)
    mxc = vals.T @ (p1_vals * w[:, None])
    return kx, mx, kxc, mxc


# ---------------------------------------------------------------------------
# element matrices on prism cells


@dataclass
class ElementMatrix:
    """Dense symmetric matrices of one prism cell, dof = (x-index, y-index)."""

    dofs: list
    stiffness: np.ndarray
    mass: np.ndarray | None = None


def _prism_matrices(kx, mx, g0, g1, with_mass, m0=None):
    nx, ny = kx.shape[0], g0.shape[0]
    stiff = np.kron(kx, g0) + np.kron(mx, g1)
    mass = np.kron(mx, m0) if (with_mass and m0 is not None) else None
    dofs = [(i, j) for i in range(nx) for j in range(ny)]
    return ElementMatrix(dofs=dofs, stiffness=stiff, mass=mass)


def local_stiffness(base_vertices, y_interval, alpha, with_mass=False):
    """P1 x P1 stiffness of one prism cell K x [a, b] against y^alpha.

    The y-dependence of grad(phi).grad(psi) is a polynomial of degree <= 2, so
    the vertical integrals reduce to weighted moments; the horizontal factors
    are exact on affine simplices.  Row sums vanish (constants are in the
    kernel).
    """
    a, b = y_interval
    kx, mx = p1_stiffness_mass(base_vertices)
    coeffs = hat_coeffs(a, b)
    g0, g1 = weighted_poly_gram(a, b, alpha, coeffs)
    m0 = g0 if with_mass else None
    return _prism_matrices(kx, mx, g0, g1, with_mass, m0)


def local_stiffness_enriched(base_vertices, y_interval, alpha,
                             space_tag="bubble", with_mass=False):
    """Stiffness of the enriched star basis on one prism cell.

    Horizontal space: P2 + cubic bubble on simplices ('bubble'), plain P2
    ('p2'); vertical space: quadratic Lagrange on [a, b].
    """
    a, b = y_interval
    kx, mx, _, _ = enriched_gram_x(base_vertices, space_tag)
    g0, g1 = weighted_poly_gram(a, b, alpha, quad_coeffs(a, b))
    m0 = g0 if with_mass else None
    return _prism_matrices(kx, mx, g0, g1, with_mass, m0)


def trace_load(base_vertices, f, ds, degree=4):
    """d_s * integral of f against the P1 hats of one base element.

    Uses a simplex rule exact for the given polynomial degree (default 4,
    which covers cubic data against the linear hats).
    """
    v = np.asarray(base_vertices, dtype=float)
    if v.ndim == 1:
        v = v.reshape(-1, 1)
    dim = v.shape[1]
    ref_pts, ref_w = simplex_quadrature(dim, degree)
    pts, scale = map_to_simplex(v, ref_pts)
    fv = np.asarray(f(pts), dtype=float)
    if not np.all(np.isfinite(fv)):
        bad = pts[~np.isfinite(fv)][0]
        raise DataError(f"data function returned a non-finite value at {bad.tolist()}")
    lam1 = ref_pts
    lam0 = 1.0 - lam1.sum(axis=1)
    hats = np.column_stack([lam0, lam1])
    return ds * scale * (ref_w * fv) @ hats
