"""Bilinear-form and load-vector assembly over conforming global coordinates.

Every form is integrated element by element with a single quadrature rule of
exactness 2*max(k_row, k_col) + 2 (exact for all polynomial integrands used
here, with margin for the position-weighted generators), assembled in local
coordinates and congruence-transformed by the conforming maps:

    A_global = T_row^T  A_local  T_col
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from gradrotfem.fespace import FESpace
from gradrotfem.poly import triangle_rule, physical_rule

__all__ = ["SymSparse", "FORM_KINDS", "assemble", "assemble_many",
           "assemble_load"]

#: form name -> (row operator, column operator); vector results are dotted
FORM_KINDS = {
    "gradrot_gradrot": ("gradrot", "gradrot"),
    "div_div": ("div", "div"),
    "mass_vec": ("value", "value"),
    "grad_coupling": ("value", "grad"),   # (v, grad sigma): vector row, scalar col
    "mass_scalar": ("value", "value"),
    "stiff_scalar": ("grad", "grad"),
}

SYMMETRIC_FORMS = {"gradrot_gradrot", "div_div", "mass_vec", "mass_scalar",
                   "stiff_scalar"}


class SymSparse:
    """Assembled matrix with a declared symmetry flag.

    Holds either a scipy CSR matrix or a dense ndarray, depending on the
    conforming transforms that produced it.
    """

    def __init__(self, mat, symmetric):
        self.mat = mat
        self.symmetric = bool(symmetric)

    @property
    def shape(self):
        return self.mat.shape

    @property
    def dim(self):
        return self.mat.shape[0]

    def toarray(self):
        return self.mat.toarray() if sp.issparse(self.mat) else np.asarray(self.mat)

    def symmetry_defect(self):
        """max |A - A^T| / max |A|."""
        A = self.mat
        if sp.issparse(A):
            d = abs(A - A.T).max()
            scale = abs(A).max()
        else:
            d = np.abs(A - A.T).max()
            scale = np.abs(A).max()
        return float(d / scale) if scale else 0.0

    def export_matrix_market(self, path):
        from scipy.io import mmwrite
        mmwrite(path, sp.coo_matrix(self.mat))

    def __matmul__(self, other):
        return self.mat @ other

    def __repr__(self):
        storage = "sparse" if sp.issparse(self.mat) else "dense"
        return f"SymSparse(dim={self.shape}, {storage}, symmetric={self.symmetric})"


def _form_rule(space_row, space_col):
    k = max(space_row.degree, space_col.degree)
    return triangle_rule(2 * k + 2)


def _check_compat(space_row, space_col, form):
    if form not in FORM_KINDS:
        raise ValueError(f"unknown form {form!r}")
    if space_row.mesh is not space_col.mesh:
        raise ValueError("row and column spaces must share a mesh")
    vec_row, vec_col = space_row.is_vector, space_col.is_vector
    need = {
        "gradrot_gradrot": (True, True),
        "div_div": (True, True),
        "mass_vec": (True, True),
        "grad_coupling": (True, False),
        "mass_scalar": (False, False),
        "stiff_scalar": (False, False),
    }[form]
    if (vec_row, vec_col) != need:
        raise ValueError(f"form {form!r} incompatible with space kinds "
                         f"({space_row.kind}, {space_col.kind})")


def assemble_many(space_row: FESpace, space_col: FESpace, forms):
    """Assemble several forms over one space pair, sharing tabulations."""
    for form in forms:
        _check_compat(space_row, space_col, form)
    mesh = space_row.mesh
    rule = _form_rule(space_row, space_col)
    same = space_row is space_col

    ops = set()
    for form in forms:
        opr, opc = FORM_KINDS[form]
        ops.add(("row", opr))
        ops.add(("col", opc))

    # symmetric same-space forms against a dense transform go through
    # rank-compressed local factors: A = (F T)^T (F T) with few rows per
    # element (the grad-rot stiffness has local rank 9 of 24)
    factored = {form for form in forms
                if same and form in SYMMETRIC_FORMS
                and not sp.issparse(space_row.T)}

    blocks = {form: [] for form in forms}
    for t in range(mesh.num_triangles):
        pts, w = physical_rule(rule, mesh.triangle_coords(t))
        tabs = {}
        for side, op in ops:
            space = space_row if side == "row" else space_col
            key = (side, op)
            if same and ("row", op) in tabs and side == "col":
                tabs[key] = tabs[("row", op)]
            else:
                tabs[key] = space.bases[t].tabulate(pts, op)
        for form in forms:
            opr, opc = FORM_KINDS[form]
            R = tabs[("row", opr)]
            if form in factored:
                F = (np.sqrt(w)[:, None, None] * R if R.ndim == 3
                     else np.sqrt(w)[:, None] * R)
                blocks[form].append(_compress_factor(F.reshape(-1, R.shape[-1])))
                continue
            C = tabs[("col", opc)]
            if R.ndim == 3:
                local = np.einsum("qcr,q,qcs->rs", R, w, C)
            else:
                local = np.einsum("qr,q,qs->rs", R, w, C)
            blocks[form].append(local)

    out = {}
    for form in forms:
        L = sp.block_diag(blocks[form], format="csr")
        if form in factored:
            Y = L @ space_row.T
            G = Y.T @ Y
            G = 0.5 * (G + G.T)
        else:
            G = _congruence(space_row.T, L, space_col.T)
        out[form] = SymSparse(G, form in SYMMETRIC_FORMS and same)
    return out


def _compress_factor(F):
    """Row-compressed factor R with R^T R = F^T F (rank-revealing QR)."""
    R, piv = sla.qr(F, mode="r", pivoting=True)
    diag = np.abs(np.diag(R))
    r = max(int((diag > 1e-14 * diag[0]).sum()), 1) if diag.size else 1
    out = np.zeros((r, F.shape[1]))
    out[:, piv] = R[:r]
    return out


def assemble(space_row: FESpace, space_col: FESpace, form: str) -> SymSparse:
    """Assemble one bilinear form; see FORM_KINDS for the integrands."""
    return assemble_many(space_row, space_col, [form])[form]


def _congruence(Tr, L, Tc):
    if sp.issparse(Tr) and sp.issparse(Tc):
        return (Tr.T @ (L @ Tc)).tocsr()
    mid = L @ Tc                       # sparse @ dense -> dense
    if sp.issparse(mid):
        mid = mid.toarray()
    if sp.issparse(Tr):
        return np.asarray(Tr.T @ mid)
    return Tr.T @ mid


def assemble_load(space: FESpace, f, rule_degree=None):
    """Load vector b_i = integral f . basis_i (or f * basis_i for scalars).

    ``f`` may be a constant (pair for vector spaces, float for scalar ones)
    or a callable mapping points (n, 2) to values ((n, 2) or (n,)).
    """
    mesh = space.mesh
    rule = triangle_rule(rule_degree or (2 * space.degree + 2))
    if not callable(f):
        const = np.asarray(f, dtype=float)
        if space.is_vector:
            f = lambda p: np.broadcast_to(const, (len(p), 2))
        else:
            f = lambda p: np.full(len(p), float(const))
    b_loc = []
    for t in range(mesh.num_triangles):
        pts, w = physical_rule(rule, mesh.triangle_coords(t))
        tab = space.bases[t].tabulate(pts, "value")
        fv = np.asarray(f(pts), dtype=float)
        if space.is_vector:
            b_loc.append(np.einsum("qc,q,qcd->d", fv, w, tab))
        else:
            b_loc.append(np.einsum("q,q,qd->d", fv, w, tab))
    b_loc = np.concatenate(b_loc)
    out = space.T.T @ b_loc
    return np.asarray(out).ravel()
