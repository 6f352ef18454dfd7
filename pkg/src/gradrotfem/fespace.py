"""Local shape-function spaces and global conforming finite element spaces.

Local spaces (per triangle K, all in physical coordinates on a per-triangle
chart centered at the centroid):

* ``lagrange``   : P_k scalar, nodal lattice basis
* ``argyris``    : P_5 scalar, C^1 element with vertex value/gradient/Hessian
                   dofs and one mean-normal-derivative dof per edge
* ``gradrot``    : grad P_k + P_{k-1} x_perp   (tangential + rot conforming)
* ``stokesrot``  : grad P_5 + P_1 x_perp + path-integral lift of the cubic
                   bubble (fully continuous vector + continuous rot), k = 4
* ``argyris_vec``: two argyris components

Global conformity is obtained without designing degrees of freedom: for the
vector kinds every element is reduced by an exact trace decomposition
(edge-moment map -> bubbles + realizable edge traces), the per-edge trace
unknowns are matched by construction, and the per-element realizability
conditions together with boundary-condition rows form one global linear
system whose SVD null space parametrizes the conforming space.  The nodal
kinds use their classical constructions, which give the same spans (tested).

Boundary-condition flags: ``rot0_boundary`` (rot v = 0 on the boundary),
``normal0_boundary`` (v . n = 0), ``dirichlet_scalar`` (scalar trace = 0).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from gradrotfem.mesh import Mesh
from gradrotfem.poly import (Poly, VecPoly, grad, rot, div, perp_scale,
                             poincare, gauss01, edge_moment_matrix)

__all__ = [
    "LocalBasis",
    "FESpace",
    "local_space",
    "build_conforming_space",
    "grad_embedding",
    "conformity_jump",
    "boundary_trace_max",
    "KINDS",
]

KINDS = ("lagrange", "argyris", "gradrot", "stokesrot", "argyris_vec")
VECTOR_KINDS = ("gradrot", "stokesrot", "argyris_vec")

SVD_RTOL = 1e-10          # relative singular-value cutoff for null spaces
_EDGE_GAUSS = 10          # exact for trace-moment products up to degree 19
_SVD_COL_LIMIT = 7000     # above this, null spaces come from pivoted QR
_QR_FLOP_BUDGET = 4e11    # orthonormalize the transform below this cost


def _nullspace(C):
    """Null-space basis of a (possibly row-redundant) dense constraint matrix.

    Small systems use the SVD; large ones a rank-revealing pivoted QR whose
    triangular back-substitution gives an exact (non-orthonormal) basis.
    Returns (N, orthonormal).
    """
    nrows, ncols = C.shape
    if nrows == 0:
        return np.eye(ncols), True
    if ncols <= _SVD_COL_LIMIT:
        _, s, Vt = np.linalg.svd(C, full_matrices=True)
        rank = int((s > SVD_RTOL * s[0]).sum()) if s.size else 0
        return Vt[rank:].T, True
    R, piv = sla.qr(C, mode="r", pivoting=True)
    R = R[: min(nrows, ncols)]
    diag = np.abs(np.diag(R))
    rank = int((diag > SVD_RTOL * diag.max()).sum())
    free = ncols - rank
    X = sla.solve_triangular(R[:rank, :rank], R[:rank, rank:])
    N = np.zeros((ncols, free))
    N[piv[:rank]] = -X
    N[piv[rank:]] = np.eye(free)
    return N, False


def _monomial_exponents(k):
    return [(i, d - i) for d in range(k + 1) for i in range(d, -1, -1)]


def _tri_chart(verts):
    centroid = verts.mean(axis=0)
    scale = max(np.linalg.norm(verts[i] - verts[j])
                for i in range(3) for j in range(i + 1, 3))
    return (centroid[0], centroid[1]), scale


def _barycentric_polys(verts, origin, scale):
    """Barycentric coordinates as degree-1 chart polynomials."""
    T = np.array([[verts[1, 0] - verts[0, 0], verts[2, 0] - verts[0, 0]],
                  [verts[1, 1] - verts[0, 1], verts[2, 1] - verts[0, 1]]])
    Tinv = np.linalg.inv(T)
    out = []
    lam12 = []
    for r in range(2):
        a, b = Tinv[r]
        const = a * (origin[0] - verts[0, 0]) + b * (origin[1] - verts[0, 1])
        c = np.array([[const, b * scale], [a * scale, 0.0]])
        lam12.append(Poly(c, origin, scale))
    lam0 = Poly(np.array([[1.0]]), origin, scale) - lam12[0] - lam12[1]
    out = [lam0, lam12[0], lam12[1]]
    return out


class LocalBasis:
    """Spanning set of a local shape-function space on one triangle."""

    def __init__(self, kind, degree, tri, fields, verts):
        self.kind = kind
        self.degree = degree
        self.tri = tri
        self.fields = fields
        self.verts = verts
        self.origin = fields[0].origin if isinstance(fields[0], Poly) \
            else fields[0].u1.origin
        self.scale = fields[0].scale if isinstance(fields[0], Poly) \
            else fields[0].u1.scale
        self._ops = {}

    @property
    def dim(self):
        return len(self.fields)

    @property
    def is_vector(self):
        return isinstance(self.fields[0], VecPoly)

    def _op_fields(self, op):
        if op in self._ops:
            return self._ops[op]
        if self.is_vector:
            table = {
                "value": lambda f: f,
                "rot": rot,
                "div": div,
                "gradrot": lambda f: grad(rot(f)),
            }
        else:
            table = {
                "value": lambda f: f,
                "grad": grad,
            }
        if op not in table:
            raise ValueError(f"operator {op!r} not available for kind {self.kind}")
        out = [table[op](f) for f in self.fields]
        self._ops[op] = out
        return out

    def _coeff_stack(self, op):
        """(ncomp, nmono, dim) coefficient stack on a common monomial grid."""
        key = ("stack", op)
        if key in self._ops:
            return self._ops[key]
        polys = self._op_fields(op)
        vector = isinstance(polys[0], VecPoly)
        comps = ([[p.u1 for p in polys], [p.u2 for p in polys]]
                 if vector else [polys])
        deg = 0
        for row in comps:
            for p in row:
                deg = max(deg, p.coeffs.shape[0] - 1, p.coeffs.shape[1] - 1)
        n = deg + 1
        stack = np.zeros((len(comps), n * n, len(polys)))
        for c, row in enumerate(comps):
            for j, p in enumerate(row):
                pad = np.zeros((n, n))
                pad[: p.coeffs.shape[0], : p.coeffs.shape[1]] = p.coeffs
                stack[c, :, j] = pad.ravel()
        self._ops[key] = (stack, n)
        return self._ops[key]

    def tabulate(self, points, op="value"):
        """Evaluate all fields (under ``op``) at physical points.

        Returns (npts, dim) for scalar quantities, (npts, 2, dim) for vector.
        """
        stack, n = self._coeff_stack(op)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xh = (pts[:, 0] - self.origin[0]) / self.scale
        yh = (pts[:, 1] - self.origin[1]) / self.scale
        vx = np.vander(xh, n, increasing=True)
        vy = np.vander(yh, n, increasing=True)
        V = (vx[:, :, None] * vy[:, None, :]).reshape(len(pts), n * n)
        out = np.einsum("qm,cmd->qcd", V, stack)
        if out.shape[1] == 1:
            return out[:, 0, :]
        return out


def local_space(kind, k, mesh_or_verts, tri=0) -> LocalBasis:
    """Construct the local shape-function space of a triangle.

    ``mesh_or_verts`` is either a Mesh (with triangle index ``tri``) or a
    (3, 2) vertex array.
    """
    if isinstance(mesh_or_verts, Mesh):
        verts = mesh_or_verts.triangle_coords(tri)
    else:
        verts = np.asarray(mesh_or_verts, dtype=float).reshape(3, 2)
    origin, scale = _tri_chart(verts)

    if kind == "lagrange":
        if not 1 <= k <= 6:
            raise ValueError("lagrange degree must be 1..6")
        fields = _lagrange_basis(k, verts, origin, scale)
    elif kind == "argyris":
        if k != 5:
            raise ValueError("argyris element implemented for degree 5")
        fields = _argyris_basis(verts, origin, scale)
    elif kind == "gradrot":
        if k != 4:
            raise ValueError("gradrot element implemented for degree 4")
        fields = _gradrot_basis(k, origin, scale)
    elif kind == "stokesrot":
        if k != 4:
            raise ValueError("stokesrot element implemented for degree 4")
        fields = _stokesrot_basis(verts, origin, scale)
    elif kind == "argyris_vec":
        if k != 5:
            raise ValueError("argyris_vec element implemented for degree 5")
        scal = _argyris_basis(verts, origin, scale)
        zero = Poly.zero(origin, scale)
        fields = [VecPoly(p, zero) for p in scal] \
            + [VecPoly(zero, p) for p in scal]
    else:
        raise ValueError(f"unknown element kind {kind!r}")
    return LocalBasis(kind, k, tri, fields, verts)


def _monomials(k, origin, scale):
    return [Poly.monomial(i, j, origin, scale)
            for (i, j) in _monomial_exponents(k)]


def _lagrange_lattice(k, verts):
    pts, keys = [], []
    for i in range(k + 1):
        for j in range(k + 1 - i):
            l = k - i - j
            lam = np.array([l, i, j]) / k   # weights on v0, v1, v2
            pts.append(lam @ verts)
            keys.append((l, i, j))
    return np.array(pts), keys


def _lagrange_basis(k, verts, origin, scale):
    pts, _ = _lagrange_lattice(k, verts)
    monos = _monomials(k, origin, scale)
    V = np.column_stack([m(pts) for m in monos])
    C = np.linalg.inv(V)
    return [Poly(_coeffs_from_vector(C[:, i], k), origin, scale)
            for i in range(len(monos))]


def _coeffs_from_vector(vec, k):
    c = np.zeros((k + 1, k + 1))
    for val, (i, j) in zip(vec, _monomial_exponents(k)):
        c[i, j] = val
    return c


def _edge_unit(verts, a, b):
    d = verts[b] - verts[a]
    L = np.linalg.norm(d)
    tan = d / L
    nor = np.array([tan[1], -tan[0]])   # outward for CCW traversal a -> b
    return L, tan, nor


def _argyris_basis(verts, origin, scale):
    """21 nodal fields: per vertex value/gradient/Hessian, per edge the mean
    outward-normal derivative (normal of the CCW traversal)."""
    k = 5
    monos = _monomials(k, origin, scale)
    rows = []
    for m in monos:
        mx, my = m.deriv(0), m.deriv(1)
        mxx, mxy, myy = mx.deriv(0), mx.deriv(1), my.deriv(1)
        col = []
        for v in range(3):
            p = verts[v]
            col.extend([m(p)[0], mx(p)[0], my(p)[0],
                        mxx(p)[0], mxy(p)[0], myy(p)[0]])
        for (a, b) in ((0, 1), (1, 2), (2, 0)):
            L, tan, nor = _edge_unit(verts, a, b)
            t, w = gauss01(6)
            epts = verts[a][None, :] + t[:, None] * (verts[b] - verts[a])[None, :]
            dn = nor[0] * mx(epts) + nor[1] * my(epts)
            col.append(w @ dn)
        rows.append(col)
    D = np.array(rows).T            # (21 dofs, 21 monomials)
    C = np.linalg.inv(D)
    return [Poly(_coeffs_from_vector(C[:, i], k), origin, scale)
            for i in range(21)]


def _gradrot_basis(k, origin, scale):
    fields = []
    for m in _monomials(k, origin, scale)[1:]:
        g = grad(m)
        fields.append(g * scale)     # O(1) magnitude on the triangle
    for m in _monomials(k - 1, origin, scale):
        fields.append(perp_scale(m))
    return fields


def _stokesrot_basis(verts, origin, scale):
    fields = []
    for m in _monomials(5, origin, scale)[1:]:
        fields.append(grad(m) * scale)
    for m in _monomials(1, origin, scale):
        fields.append(perp_scale(m))
    lam = _barycentric_polys(verts, origin, scale)
    bubble = lam[0] * lam[1] * lam[2]
    fields.append(poincare(bubble))
    return fields


# ---------------------------------------------------------------------------
# trace machinery
# ---------------------------------------------------------------------------


def _edge_gauss_geometry(mesh):
    """Per edge: physical Gauss points on the globally ordered parametrization
    plus tangent/normal data."""
    t, w = gauss01(_EDGE_GAUSS)
    P0 = mesh.vertices[mesh.edges[:, 0]]
    P1 = mesh.vertices[mesh.edges[:, 1]]
    pts = P0[:, None, :] + t[None, :, None] * (P1 - P0)[:, None, :]
    dvec = P1 - P0
    lengths = np.hypot(dvec[:, 0], dvec[:, 1])
    tangents = dvec / lengths[:, None]
    return t, w, pts, lengths, tangents


class _TraceLayout:
    """Slot layout of trace unknowns on one edge for a vector kind."""

    def __init__(self, kind, k):
        if kind == "gradrot":
            self.blocks = [("tangential", k + 1), ("rot", k)]
        elif kind == "stokesrot":
            self.blocks = [("comp1", k + 1), ("comp2", k + 1), ("rot", k)]
        else:
            raise ValueError(kind)
        self.size = sum(n for _, n in self.blocks)
        self.offsets = {}
        pos = 0
        for name, n in self.blocks:
            self.offsets[name] = (pos, pos + n)
            pos += n

    def slots(self, name):
        return self.offsets[name]


def _element_trace_matrix(basis, mesh, t, layout, geo):
    """Stacked moment map (3 * layout.size, dim) over the element's edges."""
    tpar, w, pts, lengths, tangents = geo
    m = layout.size
    T = np.zeros((3 * m, basis.dim))
    for loc in range(3):
        e = mesh.tri_edges[t, loc]
        vals = basis.tabulate(pts[e], "value")          # (nq, 2, dim)
        rots = basis.tabulate(pts[e], "rot")            # (nq, dim)
        row0 = loc * m
        for name, _ in layout.blocks:
            lo, hi = layout.slots(name)
            n_modes = hi - lo
            Mom = edge_moment_matrix(n_modes - 1, tpar, w, lengths[e])
            if name == "tangential":
                tr = vals[:, 0, :] * tangents[e, 0] + vals[:, 1, :] * tangents[e, 1]
            elif name == "comp1":
                tr = vals[:, 0, :]
            elif name == "comp2":
                tr = vals[:, 1, :]
            else:
                tr = rots
            T[row0 + lo: row0 + hi, :] = Mom @ tr
    return T


def _normal_trace_matrix(basis, mesh, t, e, geo, up_to):
    """Moments of v . n on one (boundary) edge of element t."""
    tpar, w, pts, lengths, tangents = geo
    vals = basis.tabulate(pts[e], "value")
    tan = tangents[e]
    nor = np.array([tan[1], -tan[0]])
    tr = vals[:, 0, :] * nor[0] + vals[:, 1, :] * nor[1]
    Mom = edge_moment_matrix(up_to, tpar, w, lengths[e])
    return Mom @ tr


# ---------------------------------------------------------------------------
# global spaces
# ---------------------------------------------------------------------------


class FESpace:
    """Global conforming space: local bases + conforming transform.

    ``T`` maps global coefficients to concatenated local coefficients (in
    each element's local-basis coordinates); its columns satisfy every
    interelement and boundary constraint.
    """

    def __init__(self, kind, degree, mesh, bases, T, bc_flags):
        self.kind = kind
        self.degree = degree
        self.mesh = mesh
        self.bases = bases
        self.T = T
        self.bc_flags = frozenset(bc_flags)
        self.offsets = np.cumsum([0] + [b.dim for b in bases])
        self.global_dim = T.shape[1]
        self.orthonormal = False    # dense transforms set this when QR'ed

    @property
    def local_dim(self):
        return self.offsets[-1]

    @property
    def is_vector(self):
        return self.bases[0].is_vector

    def local_block(self, t):
        block = self.T[self.offsets[t]: self.offsets[t + 1]]
        return block.toarray() if sp.issparse(block) else block

    def eval_field(self, coeffs, t, points, op="value"):
        """Evaluate a global field on element t at physical points."""
        coeffs = np.asarray(coeffs, dtype=float)
        loc = self.local_block(t) @ coeffs
        tab = self.bases[t].tabulate(points, op)
        return tab @ loc

    def eval_many(self, coeffs, op="value", points_fn=None):
        """Evaluate on every element; points_fn(t) -> physical points."""
        return [self.eval_field(coeffs, t, points_fn(t), op)
                for t in range(self.mesh.num_triangles)]


def build_conforming_space(mesh, kind, k=None, bc_flags=()) -> FESpace:
    """Assemble the global conforming space of the given kind.

    See module docstring for kinds and flags.  Unsupported combinations
    raise ValueError.
    """
    bc = frozenset(bc_flags)
    defaults = {"lagrange": 4, "argyris": 5, "gradrot": 4,
                "stokesrot": 4, "argyris_vec": 5}
    if kind not in defaults:
        raise ValueError(f"unknown element kind {kind!r}")
    if k is None:
        k = defaults[kind]

    if kind == "lagrange":
        if bc - {"dirichlet_scalar"}:
            raise ValueError("lagrange supports only the dirichlet_scalar flag")
        return _build_lagrange(mesh, k, "dirichlet_scalar" in bc)
    if kind == "argyris":
        if bc:
            raise ValueError("argyris scalar space carries no boundary flags")
        return _build_argyris_scalar(mesh)
    if kind == "argyris_vec":
        if bc - {"rot0_boundary", "normal0_boundary"}:
            raise ValueError("argyris_vec supports rot0/normal0 flags")
        return _build_argyris_vector(mesh, bc)
    if bc - {"rot0_boundary", "normal0_boundary"}:
        raise ValueError(f"{kind} supports rot0/normal0 flags")
    return _build_trace_reduced(mesh, kind, k, bc)


def _build_lagrange(mesh, k, dirichlet):
    nt = mesh.num_triangles
    bases = [local_space("lagrange", k, mesh, t) for t in range(nt)]
    nv, ne = mesh.num_vertices, mesh.num_edges
    n_edge = k - 1
    n_int = (k - 1) * (k - 2) // 2
    n_global = nv + ne * n_edge + nt * n_int

    rows, cols = [], []
    offsets = np.cumsum([0] + [b.dim for b in bases])
    for t in range(nt):
        _, keys = _lagrange_lattice(k, mesh.triangle_coords(t))
        tri = mesh.triangles[t]
        for loc, (l, i, j) in enumerate(keys):
            lamv = {int(tri[0]): l, int(tri[1]): i, int(tri[2]): j}
            zero = [v for v, c in lamv.items() if c == 0]
            if len(zero) == 2:                       # vertex node
                g = [v for v, c in lamv.items() if c == k][0]
            elif len(zero) == 1:                     # edge node
                a, b = [int(v) for v in tri if v != zero[0]]
                lo, hi = (a, b) if a < b else (b, a)
                e = _edge_index(mesh, lo, hi)
                s = lamv[hi]                         # steps from the low end
                g = nv + e * n_edge + (s - 1)
            else:                                    # interior node
                g = nv + ne * n_edge + t * n_int + _interior_rank(keys, loc, k)
            rows.append(offsets[t] + loc)
            cols.append(g)
    data = np.ones(len(rows))
    T = sp.csr_matrix((data, (rows, cols)),
                      shape=(sum(b.dim for b in bases), n_global))
    if dirichlet:
        keep = np.ones(n_global, dtype=bool)
        bverts = np.unique(mesh.edges[mesh.boundary_edges].ravel())
        keep[bverts] = False
        for e in mesh.boundary_edges:
            keep[nv + e * n_edge: nv + (e + 1) * n_edge] = False
        T = T[:, keep]
    space = FESpace("lagrange", k, mesh, bases, T.tocsr(),
                    {"dirichlet_scalar"} if dirichlet else set())
    return space


def _interior_rank(keys, loc, k):
    rank = 0
    for m, (l, i, j) in enumerate(keys):
        if min(l, i, j) > 0:
            if m == loc:
                return rank
            rank += 1
    raise AssertionError("interior node not found")


def _edge_index(mesh, a, b):
    # edges are sorted pairs; binary search over the lexicographic order
    idx = np.searchsorted(mesh.edges[:, 0] * mesh.num_vertices + mesh.edges[:, 1],
                          a * mesh.num_vertices + b)
    return int(idx)


def _build_argyris_scalar(mesh):
    nt = mesh.num_triangles
    bases = [local_space("argyris", 5, mesh, t) for t in range(nt)]
    nv = mesh.num_vertices
    n_global = 6 * nv + mesh.num_edges
    rows, cols, data = [], [], []
    off = 0
    for t in range(nt):
        tri = mesh.triangles[t]
        gdofs = []
        for v in tri:
            gdofs.extend(range(6 * v, 6 * v + 6))
        for loc in range(3):
            gdofs.append(6 * nv + mesh.tri_edges[t, loc])
        # the local normal-derivative dof uses the CCW outward normal; the
        # global dof is defined with the normal of the low-to-high traversal
        signs = [1.0] * 18
        for loc, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
            signs.append(1.0 if tri[a] < tri[b] else -1.0)
        for loc, (g, s) in enumerate(zip(gdofs, signs)):
            rows.append(off + loc)
            cols.append(g)
            data.append(s)
        off += 21
    T = sp.csr_matrix((data, (rows, cols)), shape=(off, n_global))
    return FESpace("argyris", 5, mesh, bases, T, set())


def _build_argyris_vector(mesh, bc):
    scalar = _build_argyris_scalar(mesh)
    nt = mesh.num_triangles
    bases = [local_space("argyris_vec", 5, mesh, t) for t in range(nt)]
    n_s = scalar.global_dim
    # interleave components elementwise: local dofs [comp1(21), comp2(21)]
    blocks = []
    for t in range(nt):
        B = scalar.T[21 * t: 21 * (t + 1)]
        Z = sp.csr_matrix(B.shape)
        blocks.append(sp.vstack([sp.hstack([B, Z]), sp.hstack([Z, B])]))
    T = sp.vstack(blocks).tocsr()
    space = FESpace("argyris_vec", 5, mesh, bases, T, set())
    if not bc:
        return space
    C = _vector_boundary_rows(space, bc)
    T2 = _null_reduce_sparse(T, C)
    return FESpace("argyris_vec", 5, mesh, bases, T2, bc)


def _vector_boundary_rows(space, bc):
    """Boundary-condition moment rows in global coordinates (sparse)."""
    mesh = space.mesh
    geo = _edge_gauss_geometry(mesh)
    tpar, w, pts, lengths, tangents = geo
    k = space.degree
    rows = []
    for e in mesh.boundary_edges:
        t = int(mesh.edge_tris[e, 0])
        block = space.local_block(t)
        basis = space.bases[t]
        if "normal0_boundary" in bc:
            Mom = _normal_trace_matrix(basis, mesh, t, e, geo, k)
            rows.append(Mom @ block)
        if "rot0_boundary" in bc:
            rots = basis.tabulate(pts[e], "rot")
            Mom = edge_moment_matrix(k - 1, tpar, w, lengths[e])
            rows.append((Mom @ rots) @ block)
    return np.vstack(rows)


def _null_reduce_sparse(T, C):
    """Restrict T to the null space of constraint rows C (dense rows)."""
    touched = np.nonzero(np.abs(C).max(axis=0) > 0.0)[0]
    if touched.size == 0:
        return T
    sub = C[:, touched]
    _, s, Vt = np.linalg.svd(sub, full_matrices=True)
    rank = int((s > SVD_RTOL * s[0]).sum()) if s.size else 0
    N = Vt[rank:].T
    n = T.shape[1]
    untouched = np.setdiff1d(np.arange(n), touched)
    rows = untouched.tolist()
    cols = list(range(untouched.size))
    vals = [1.0] * untouched.size
    nr, nc = np.nonzero(np.abs(N) > 0.0)
    rows.extend(touched[nr].tolist())
    cols.extend((untouched.size + nc).tolist())
    vals.extend(N[nr, nc].tolist())
    P = sp.coo_matrix((vals, (rows, cols)),
                      shape=(n, untouched.size + N.shape[1])).tocsr()
    return (T @ P).tocsr()


def _build_trace_reduced(mesh, kind, k, bc):
    """gradrot / stokesrot spaces via exact trace decomposition."""
    nt = mesh.num_triangles
    bases = [local_space(kind, k, mesh, t) for t in range(nt)]
    layout = _TraceLayout(kind, k)
    m = layout.size
    geo = _edge_gauss_geometry(mesh)
    ne = mesh.num_edges

    lifts, bubbles, realiz = [], [], []
    for t in range(nt):
        Tm = _element_trace_matrix(bases[t], mesh, t, layout, geo)
        U, s, Vt = np.linalg.svd(Tm)
        rank = int((s > SVD_RTOL * s[0]).sum())
        lifts.append(Vt[:rank].T @ np.diag(1.0 / s[:rank]) @ U[:, :rank].T)
        bubbles.append(Vt[rank:].T)
        realiz.append(U[:, rank:].T)

    # elements whose bubbles enter the constraint system (gradrot + normal0)
    need_bub = set()
    if kind == "gradrot" and "normal0_boundary" in bc:
        for e in mesh.boundary_edges:
            need_bub.add(int(mesh.edge_tris[e, 0]))
    bub_cols = {}
    pos = ne * m
    for t in sorted(need_bub):
        bub_cols[t] = (pos, pos + bubbles[t].shape[1])
        pos += bubbles[t].shape[1]
    ncols = pos

    def g_slots(t):
        s = np.empty(3 * m, dtype=int)
        for loc in range(3):
            e = mesh.tri_edges[t, loc]
            s[loc * m: (loc + 1) * m] = np.arange(e * m, (e + 1) * m)
        return s

    rows = []
    cols = []
    vals = []
    nrows = 0

    def add_block(block, colidx):
        nonlocal nrows
        r, c = np.nonzero(np.abs(block) > 0.0)
        rows.extend((nrows + r).tolist())
        cols.extend(colidx[c].tolist())
        vals.extend(block[r, c].tolist())
        nrows += block.shape[0]

    for t in range(nt):
        if realiz[t].shape[0]:
            add_block(realiz[t], g_slots(t))

    for e in mesh.boundary_edges:
        e = int(e)
        if "rot0_boundary" in bc:
            lo, hi = layout.slots("rot")
            block = np.eye(m)[lo:hi]
            add_block(block, np.arange(e * m, (e + 1) * m))
        if "normal0_boundary" in bc:
            t = int(mesh.edge_tris[e, 0])
            Nm = _normal_trace_matrix(bases[t], mesh, t, e, geo, k)
            if kind == "stokesrot":
                # v.n moments are combinations of the matched component slots
                tan = geo[4][e]
                nor = np.array([tan[1], -tan[0]])
                lo1, hi1 = layout.slots("comp1")
                lo2, hi2 = layout.slots("comp2")
                block = np.zeros((k + 1, m))
                block[:, lo1:hi1] = nor[0] * np.eye(k + 1)
                block[:, lo2:hi2] = nor[1] * np.eye(k + 1)
                add_block(block, np.arange(e * m, (e + 1) * m))
            else:
                gcols = g_slots(t)
                blk_g = Nm @ lifts[t]
                blk_b = Nm @ bubbles[t]
                block = np.zeros((Nm.shape[0], 3 * m + blk_b.shape[1]))
                block[:, : 3 * m] = blk_g
                block[:, 3 * m:] = blk_b
                lo, hi = bub_cols[t]
                add_block(block, np.concatenate([gcols, np.arange(lo, hi)]))

    C = sp.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols)).toarray() \
        if nrows else np.zeros((0, ncols))
    N, _ = _nullspace(C)
    del C

    # lift the interface null basis to local coefficients
    nloc_total = sum(b.dim for b in bases)
    ntrace = N.shape[1]
    Ttrace = np.zeros((nloc_total, ntrace))
    off = 0
    for t in range(nt):
        loc = lifts[t] @ N[g_slots(t)]
        if t in bub_cols:
            lo, hi = bub_cols[t]
            loc = loc + bubbles[t] @ N[lo:hi]
        Ttrace[off: off + bases[t].dim] = loc
        off += bases[t].dim

    orthonormal = True
    if ntrace and Ttrace.shape[0] * ntrace ** 2 <= _QR_FLOP_BUDGET:
        Q, R, _ = sla.qr(Ttrace, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        keep = diag > SVD_RTOL * diag.max()
        Ttrace = Q[:, keep]
    elif ntrace:
        # at large scale keep the (independent) lifted columns unorthogonalized
        orthonormal = False

    # free bubbles: orthonormal per element, orthogonal to the trace part
    bub_blocks = []
    off = 0
    for t in range(nt):
        if t not in bub_cols and bubbles[t].shape[1]:
            B = np.zeros((nloc_total, bubbles[t].shape[1]))
            B[off: off + bases[t].dim] = bubbles[t]
            bub_blocks.append(B)
        off += bases[t].dim
    parts = bub_blocks + ([Ttrace] if Ttrace.shape[1] else [])
    T = np.concatenate(parts, axis=1) if parts else np.zeros((nloc_total, 0))
    space = FESpace(kind, k, mesh, bases, T, bc)
    space.orthonormal = orthonormal
    return space


# ---------------------------------------------------------------------------
# inclusion and conformity diagnostics
# ---------------------------------------------------------------------------


def grad_embedding(scalar_space, vector_space):
    """Express gradients of a scalar space inside a vector space.

    Returns (E, residual): E maps scalar global coefficients to vector global
    coefficients with ``grad s_h = field(E @ s)``; the residual is the largest
    relative defect of the least-squares embedding (0 when grad S_h is truly a
    subspace, as for the gradrot/stokesrot kinds).
    """
    mesh = scalar_space.mesh
    nt = mesh.num_triangles
    Tv = vector_space.T
    blocks = []
    for t in range(nt):
        vb = vector_space.bases[t]
        sb = scalar_space.bases[t]
        deg = max(vb.degree, sb.degree)
        n = deg + 1
        cols = []
        for f in vb.fields:
            cols.append(_vec_poly_flat(f, n))
        Mat = np.column_stack(cols)
        rhs = np.column_stack([_vec_poly_flat(grad(p), n) for p in sb.fields])
        sol, *_ = np.linalg.lstsq(Mat, rhs, rcond=None)
        blocks.append(sol)
    G = sp.block_diag(blocks, format="csr")
    local = G @ scalar_space.T             # local vector coeffs of grad s_h
    if sp.issparse(local):
        local = local.toarray()
    if sp.issparse(Tv):
        gram = (Tv.T @ Tv).toarray()
        E = np.linalg.solve(gram, Tv.T @ local)
        res = local - Tv @ E
    elif getattr(vector_space, "orthonormal", False):
        E = Tv.T @ local
        res = local - Tv @ E
    else:
        E, *_ = np.linalg.lstsq(Tv, local, rcond=None)
        res = local - Tv @ E
    scale = max(np.linalg.norm(local, axis=0).max(), 1e-30)
    return E, float(np.linalg.norm(res, axis=0).max() / scale)


def _vec_poly_flat(v, n):
    out = np.zeros(2 * n * n)
    for c, p in enumerate((v.u1, v.u2)):
        pad = np.zeros((n, n))
        pad[: p.coeffs.shape[0], : p.coeffs.shape[1]] = p.coeffs
        out[c * n * n: (c + 1) * n * n] = pad.ravel()
    return out


def _jump_quantities(kind):
    if kind == "gradrot":
        return ("tangential", "rot")
    if kind == "stokesrot":
        return ("comp1", "comp2", "rot")
    if kind in ("lagrange",):
        return ("value",)
    if kind == "argyris":
        return ("value", "normal_deriv")
    if kind == "argyris_vec":
        return ("comp1", "comp2", "rot")
    raise ValueError(kind)


def conformity_jump(space, n_samples=20, coeffs=None):
    """Largest advertised-trace jump across interior edges.

    Checks every global basis field (or one given coefficient vector) at
    ``n_samples`` points per interior edge; conforming spaces stay below
    1e-10 relative to the field scale.
    """
    mesh = space.mesh
    tpts = np.linspace(0.02, 0.98, n_samples)
    worst = 0.0
    interior = [e for e in range(mesh.num_edges)
                if e not in set(mesh.boundary_edges.tolist())]
    for e in interior:
        P0, P1 = mesh.edge_coords(e)
        pts = P0[None, :] + tpts[:, None] * (P1 - P0)[None, :]
        tan = (P1 - P0) / np.linalg.norm(P1 - P0)
        ta, tb = mesh.edge_tris[e]
        sides = []
        for t in (ta, tb):
            block = space.local_block(t)
            if coeffs is not None:
                block = (block @ coeffs)[:, None]
            basis = space.bases[t]
            quant = []
            for name in _jump_quantities(space.kind):
                if name == "tangential":
                    v = basis.tabulate(pts, "value")
                    quant.append(v[:, 0] * tan[0] + v[:, 1] * tan[1])
                elif name == "comp1":
                    quant.append(basis.tabulate(pts, "value")[:, 0])
                elif name == "comp2":
                    quant.append(basis.tabulate(pts, "value")[:, 1])
                elif name == "rot":
                    quant.append(basis.tabulate(pts, "rot"))
                elif name == "value":
                    quant.append(basis.tabulate(pts, "value"))
                elif name == "normal_deriv":
                    g = basis.tabulate(pts, "grad")
                    quant.append(g[:, 0] * tan[1] - g[:, 1] * tan[0])
            sides.append(np.concatenate(quant, axis=0) @ block)
        scale = max(np.abs(sides[0]).max(), np.abs(sides[1]).max(), 1.0)
        worst = max(worst, np.abs(sides[0] - sides[1]).max() / scale)
    return worst


def boundary_trace_max(space, what, n_samples=20, coeffs=None):
    """Max |rot| or |v.n| over boundary edge samples for all basis fields."""
    mesh = space.mesh
    tpts = np.linspace(0.02, 0.98, n_samples)
    worst = 0.0
    for e in mesh.boundary_edges:
        P0, P1 = mesh.edge_coords(int(e))
        pts = P0[None, :] + tpts[:, None] * (P1 - P0)[None, :]
        tan = (P1 - P0) / np.linalg.norm(P1 - P0)
        nor = np.array([tan[1], -tan[0]])
        t = int(mesh.edge_tris[e, 0])
        block = space.local_block(t)
        if coeffs is not None:
            block = (block @ coeffs)[:, None]
        basis = space.bases[t]
        if what == "rot":
            q = basis.tabulate(pts, "rot")
        elif what == "normal":
            v = basis.tabulate(pts, "value")
            q = v[:, 0] * nor[0] + v[:, 1] * nor[1]
        else:
            raise ValueError(what)
        vals = q @ block
        scale = max(np.abs(block).max(), 1.0)
        worst = max(worst, np.abs(vals).max() / scale)
    return worst
