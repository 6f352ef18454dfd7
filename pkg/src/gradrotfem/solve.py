"""Saddle-point solves and symmetric generalized eigensolves.

The mixed problems eliminate the scalar multiplier through its mass matrix
(the second equation gives ``sigma = Msig^{-1} G^T u``), reducing the pencil
to ``(A + G Msig^{-1} G^T) u = lambda M u`` with a symmetric positive
semidefinite left side; its kernel is exactly the discrete harmonic space.

Dense ``scipy.linalg.eigh`` is the reference path; above ``SPARSE_CUTOFF``
unknowns with sparse operators a shift-invert Lanczos path is used and is
cross-checked against the dense path in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from gradrotfem.assembly import SymSparse

__all__ = ["EigResult", "SourceResult", "SolverError", "solve_saddle",
           "eig_mixed", "eig_primal", "reduced_operator"]

ZERO_THRESHOLD = 1e-6      # relative cutoff classifying harmonic eigenvalues
SPARSE_CUTOFF = 6000


class SolverError(RuntimeError):
    """Singular system or eigensolver breakdown."""


@dataclass
class EigResult:
    """Ascending eigenvalues with global-coordinate eigenvectors."""

    values: np.ndarray
    vectors: np.ndarray = field(repr=False)
    zero_count: int = 0
    zero_threshold: float = ZERO_THRESHOLD
    residuals: np.ndarray = field(default=None, repr=False)

    @property
    def normalized(self):
        """Eigenvalues in units of pi^2."""
        return self.values / np.pi ** 2


@dataclass
class SourceResult:
    """Solution of a source problem: u (and sigma for mixed schemes)."""

    u: np.ndarray = field(repr=False)
    sigma: np.ndarray | None = field(default=None, repr=False)
    residual: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _mat(x):
    if isinstance(x, SymSparse):
        return x.mat
    return x


def _dense(x):
    x = _mat(x)
    return x.toarray() if sp.issparse(x) else np.asarray(x, dtype=float)


def classify_zeros(values, rel=ZERO_THRESHOLD):
    """Count leading eigenvalues that are zero up to rounding.

    The reference eigenvalue is the first one above the relative cutoff;
    slightly negative rounding-size values count as zero.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0, 0.0
    scale = float(np.abs(values).max())
    if scale == 0.0:
        return len(values), 0.0
    ref = scale
    count = 0
    for _ in range(4):
        cut = rel * ref
        new_count = int(np.sum(values < cut))
        if new_count >= len(values):
            return len(values), cut
        new_ref = float(values[new_count])
        if new_count == count and new_ref == ref:
            break
        count, ref = new_count, new_ref
    return count, rel * ref


def reduced_operator(A, G, Msig):
    """Schur-eliminated mixed operator A + G Msig^{-1} G^T (dense)."""
    A = _dense(A)
    G = _dense(G)
    Ms = _dense(Msig)
    try:
        c = sla.cho_factor(Ms)
    except np.linalg.LinAlgError as exc:
        raise SolverError("multiplier mass matrix not positive definite") from exc
    X = sla.cho_solve(c, G.T)
    K = A + G @ X
    return 0.5 * (K + K.T)


def _pencil_smallest(K, M, num, shift=False):
    """num smallest eigenpairs of K u = lambda M u, M positive definite."""
    n = K.shape[0] if not isinstance(K, SymSparse) else K.shape[0]
    Km, Mm = _mat(K), _mat(M)
    num = min(num, n)
    if num == 0:
        return np.zeros(0), np.zeros((n, 0))
    use_sparse = n > SPARSE_CUTOFF and sp.issparse(Km) and sp.issparse(Mm)
    if use_sparse:
        scale = Km.diagonal().max() / max(Mm.diagonal().max(), 1e-300)
        sigma = -1e-3 * scale
        v0 = np.full(n, 1.0 / np.sqrt(n))
        vals, vecs = spla.eigsh(Km.tocsc(), k=num, M=Mm.tocsc(), sigma=sigma,
                                which="LM", v0=v0)
        order = np.argsort(vals)
        return vals[order], vecs[:, order]
    Kd, Md = _dense(K), _dense(M)
    if shift:
        vals, vecs = sla.eigh(Kd + Md, Md, subset_by_index=[0, num - 1])
        vals = vals - 1.0
    else:
        vals, vecs = sla.eigh(Kd, Md, subset_by_index=[0, num - 1])
    return vals, vecs


def _finish(K, M, vals, vecs):
    Km, Mm = _mat(K), _mat(M)
    Kn = abs(Km).max() if sp.issparse(Km) else np.abs(Km).max()
    res = np.empty(len(vals))
    for i, lam in enumerate(vals):
        x = vecs[:, i]
        r = Km @ x - lam * (Mm @ x)
        res[i] = np.linalg.norm(r) / (Kn * np.linalg.norm(x))
    zc, cut = classify_zeros(vals)
    return EigResult(values=np.asarray(vals), vectors=vecs, zero_count=zc,
                     zero_threshold=ZERO_THRESHOLD, residuals=res)


def eig_mixed(A, G, Msig, M, num, shift=False) -> EigResult:
    """Smallest eigenpairs of the Schur-reduced mixed pencil."""
    K = reduced_operator(A, G, Msig)
    vals, vecs = _pencil_smallest(K, _dense(M), num, shift=shift)
    return _finish(K, _dense(M), vals, vecs)


def eig_primal(K, M, num, shift=False) -> EigResult:
    """Smallest eigenpairs of K u = lambda M u."""
    vals, vecs = _pencil_smallest(_mat(K), _mat(M), num, shift=shift)
    return _finish(K, M, vals, vecs)


def solve_saddle(A, G, Msig, b, harmonic=None) -> SourceResult:
    """Solve the symmetric block system [[A, G], [G^T, -Msig]] = [b, 0].

    ``harmonic`` (columns, mass-orthonormal in the vector space, with the
    vector mass matrix as ``harmonic=(H, M)``) deflates the kernel on
    domains with nontrivial cohomology: the right side is projected onto the
    complement and the solution is constrained against the harmonic fields
    by a bordered system.
    """
    A = _dense(A)
    G = _dense(G)
    Ms = _dense(Msig)
    b = np.asarray(b, dtype=float)
    n, m = A.shape[0], Ms.shape[0]

    rows = [np.hstack([A, G]), np.hstack([G.T, -Ms])]
    rhs = np.concatenate([b, np.zeros(m)])
    nh = 0
    if harmonic is not None:
        H, M = harmonic
        H = np.asarray(H, dtype=float)
        M = _dense(M)
        if H.ndim == 1:
            H = H[:, None]
        nh = H.shape[1]
        if nh:
            MH = M @ H
            b = b - MH @ (H.T @ b)
            rhs = np.concatenate([b, np.zeros(m + nh)])
            top = np.hstack([A, G, MH])
            mid = np.hstack([G.T, -Ms, np.zeros((m, nh))])
            bot = np.hstack([MH.T, np.zeros((nh, m + nh))])
            rows = [top, mid, bot]
    S = np.vstack(rows)
    try:
        sol = sla.solve(S, rhs, assume_a="sym")
    except np.linalg.LinAlgError as exc:
        kdim = int(np.sum(sla.svdvals(S) < 1e-12 * np.abs(S).max()))
        raise SolverError(f"singular saddle system (numerical kernel "
                          f"dimension {kdim})") from exc
    resid = np.linalg.norm(S @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if resid > 1e-8:
        kdim = int(np.sum(sla.svdvals(S) < 1e-10 * np.abs(S).max()))
        raise SolverError(f"saddle solve failed (relative residual {resid:.2e}, "
                          f"numerical kernel dimension {kdim})")
    u = sol[:n]
    sigma = sol[n: n + m]
    return SourceResult(u=u, sigma=sigma, residual=float(resid))
