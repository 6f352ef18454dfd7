"""Exact bivariate polynomial calculus on triangles.

Polynomials are stored as dense coefficient matrices ``c[i, j]`` for the
monomials ``xh**i * yh**j`` in chart coordinates ``xh = (x - origin) / scale``.
The chart is a translation plus isotropic scaling of the physical plane, so
differential operators act on chart coefficients up to powers of ``1/scale``
and no Piola-style transforms are ever needed.  Polynomials on different
charts interact only through point evaluation (quadrature, edge traces).

Sign conventions, fixed once for the whole package:

* ``rot v  = d(v2)/dx - d(v1)/dy``  (scalar curl of a vector field)
* ``curl p = (dp/dy, -dp/dx)``      (vector curl of a scalar)
* ``x_perp = (-y, x)``

hence ``rot(curl p) = -laplace(p)`` and ``rot(grad p) = 0`` identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.signal import convolve2d

__all__ = [
    "Poly",
    "VecPoly",
    "grad",
    "curl",
    "rot",
    "div",
    "perp_scale",
    "poincare",
    "QuadratureRule",
    "triangle_rule",
    "physical_rule",
    "gauss01",
    "legendre01",
    "edge_moments",
]


class Poly:
    """Bivariate polynomial on an affine chart.

    Parameters
    ----------
    coeffs : array_like
        2D array, ``coeffs[i, j]`` multiplies ``xh**i * yh**j``.
    origin : pair of floats, optional
        Chart origin in physical coordinates (default: global frame).
    scale : float, optional
        Isotropic chart scale (default 1).
    """

    __slots__ = ("coeffs", "origin", "scale")

    def __init__(self, coeffs, origin=(0.0, 0.0), scale=1.0):
        c = np.atleast_2d(np.asarray(coeffs, dtype=float))
        self.coeffs = c
        self.origin = (float(origin[0]), float(origin[1]))
        self.scale = float(scale)

    # -- basic structure ---------------------------------------------------

    @property
    def degree(self):
        """Total degree (index of the last nonzero anti-diagonal)."""
        nz = np.argwhere(self.coeffs != 0.0)
        if nz.size == 0:
            return 0
        return int((nz[:, 0] + nz[:, 1]).max())

    def same_chart(self, other):
        return self.origin == other.origin and self.scale == other.scale

    def _require_chart(self, other):
        if not self.same_chart(other):
            raise ValueError("polynomials live on different charts")

    @classmethod
    def zero(cls, origin=(0.0, 0.0), scale=1.0):
        return cls(np.zeros((1, 1)), origin, scale)

    @classmethod
    def monomial(cls, i, j, origin=(0.0, 0.0), scale=1.0):
        c = np.zeros((i + 1, j + 1))
        c[i, j] = 1.0
        return cls(c, origin, scale)

    def copy(self):
        return Poly(self.coeffs.copy(), self.origin, self.scale)

    # -- algebra (same chart) ----------------------------------------------

    def _padded_pair(self, other):
        n0 = max(self.coeffs.shape[0], other.coeffs.shape[0])
        n1 = max(self.coeffs.shape[1], other.coeffs.shape[1])
        a = np.zeros((n0, n1))
        b = np.zeros((n0, n1))
        a[: self.coeffs.shape[0], : self.coeffs.shape[1]] = self.coeffs
        b[: other.coeffs.shape[0], : other.coeffs.shape[1]] = other.coeffs
        return a, b

    def __add__(self, other):
        if np.isscalar(other):
            c = self.coeffs.copy()
            c[0, 0] += other
            return Poly(c, self.origin, self.scale)
        self._require_chart(other)
        a, b = self._padded_pair(other)
        return Poly(a + b, self.origin, self.scale)

    __radd__ = __add__

    def __neg__(self):
        return Poly(-self.coeffs, self.origin, self.scale)

    def __sub__(self, other):
        if np.isscalar(other):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if np.isscalar(other):
            return Poly(self.coeffs * other, self.origin, self.scale)
        self._require_chart(other)
        c = convolve2d(self.coeffs, other.coeffs)
        return Poly(c, self.origin, self.scale)

    __rmul__ = __mul__

    # -- calculus ------------------------------------------------------------

    def deriv(self, axis):
        """Physical-coordinate partial derivative (0: d/dx, 1: d/dy)."""
        if self.coeffs.shape[axis] == 1:
            return Poly.zero(self.origin, self.scale)
        c = npoly.polyder(self.coeffs, axis=axis) / self.scale
        return Poly(c, self.origin, self.scale)

    # -- evaluation ----------------------------------------------------------

    def __call__(self, points):
        """Evaluate at physical points, shape (n, 2) or (2,)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xh = (pts[:, 0] - self.origin[0]) / self.scale
        yh = (pts[:, 1] - self.origin[1]) / self.scale
        return npoly.polyval2d(xh, yh, self.coeffs)

    # -- chart handling --------------------------------------------------------

    def to_chart(self, origin=(0.0, 0.0), scale=1.0):
        """Re-express exactly on another chart."""
        if (self.origin == (float(origin[0]), float(origin[1]))
                and self.scale == float(scale)):
            return self.copy()
        alpha = float(scale) / self.scale
        beta = ((origin[0] - self.origin[0]) / self.scale,
                (origin[1] - self.origin[1]) / self.scale)
        d0, d1 = self.coeffs.shape
        # 1D coefficient arrays of (alpha*t + beta_k)**i, exact binomials
        pow_x = _affine_powers(d0 - 1, alpha, beta[0])
        pow_y = _affine_powers(d1 - 1, alpha, beta[1])
        out = np.zeros((d0, d1))
        for i in range(d0):
            row = self.coeffs[i]
            if not row.any():
                continue
            for j in range(d1):
                if row[j] == 0.0:
                    continue
                out[: i + 1, : j + 1] += row[j] * np.outer(pow_x[i], pow_y[j])
        return Poly(out, origin, scale)

    def trim(self, tol=0.0):
        """Drop trailing zero rows/columns (and entries below tol)."""
        c = self.coeffs.copy()
        if tol > 0.0:
            c[np.abs(c) <= tol] = 0.0
        rows = np.nonzero(c.any(axis=1))[0]
        cols = np.nonzero(c.any(axis=0))[0]
        if rows.size == 0:
            return Poly.zero(self.origin, self.scale)
        return Poly(c[: rows[-1] + 1, : cols[-1] + 1], self.origin, self.scale)

    def __repr__(self):
        return f"Poly(degree={self.degree}, origin={self.origin}, scale={self.scale})"


def _affine_powers(max_power, alpha, beta):
    """Coefficients of (alpha*t + beta)**i for i = 0..max_power."""
    pows = [np.array([1.0])]
    base = np.array([beta, alpha])
    for _ in range(max_power):
        pows.append(np.convolve(pows[-1], base))
    return pows


class VecPoly:
    """Pair of scalar polynomials on a common chart, a 2-vector field."""

    __slots__ = ("u1", "u2")

    def __init__(self, u1, u2):
        u1._require_chart(u2)
        self.u1 = u1
        self.u2 = u2

    @property
    def origin(self):
        return self.u1.origin

    @property
    def scale(self):
        return self.u1.scale

    @property
    def degree(self):
        return max(self.u1.degree, self.u2.degree)

    def __add__(self, other):
        return VecPoly(self.u1 + other.u1, self.u2 + other.u2)

    def __sub__(self, other):
        return VecPoly(self.u1 - other.u1, self.u2 - other.u2)

    def __mul__(self, scalar):
        return VecPoly(self.u1 * scalar, self.u2 * scalar)

    __rmul__ = __mul__

    def __call__(self, points):
        """Evaluate at physical points; returns shape (n, 2)."""
        return np.stack([self.u1(points), self.u2(points)], axis=-1)

    def dot_tangent(self, tangent):
        return self.u1 * float(tangent[0]) + self.u2 * float(tangent[1])

    def to_chart(self, origin=(0.0, 0.0), scale=1.0):
        return VecPoly(self.u1.to_chart(origin, scale),
                       self.u2.to_chart(origin, scale))

    def __repr__(self):
        return f"VecPoly(degree={self.degree})"


# -- differential operators ------------------------------------------------


def grad(p: Poly) -> VecPoly:
    """grad p = (dp/dx, dp/dy)."""
    return VecPoly(p.deriv(0), p.deriv(1))


def curl(p: Poly) -> VecPoly:
    """curl p = (dp/dy, -dp/dx); satisfies rot(curl p) = -laplace(p)."""
    return VecPoly(p.deriv(1), -p.deriv(0))


def rot(v: VecPoly) -> Poly:
    """rot v = d(v2)/dx - d(v1)/dy."""
    return v.u2.deriv(0) - v.u1.deriv(1)


def div(v: VecPoly) -> Poly:
    return v.u1.deriv(0) + v.u2.deriv(1)


def _xperp_components(origin, scale):
    """x_perp = (-y, x) written as degree-1 polynomials on the given chart."""
    ox, oy = origin
    # -y = -(oy + scale*yh),  x = ox + scale*xh
    c1 = np.array([[-oy, -scale]])        # constant + yh term
    c2 = np.array([[ox], [scale]])        # constant + xh term
    return Poly(c1, origin, scale), Poly(c2, origin, scale)


def perp_scale(p: Poly) -> VecPoly:
    """p * x_perp with x_perp = (-y, x); rot(p x_perp) = x . grad p + 2 p."""
    e1, e2 = _xperp_components(p.origin, p.scale)
    return VecPoly(p * e1, p * e2)


def poincare(p: Poly) -> VecPoly:
    """Path-integral right inverse of rot on scalars.

    For p homogeneous of degree m (in the global frame) the integral
    ``int_0^1 p(t x) t x_perp dt`` evaluates to ``p * x_perp / (m + 2)``;
    general polynomials are handled by homogeneous decomposition.  Satisfies
    ``rot(poincare(p)) = p`` exactly.  The result is returned on p's chart.
    """
    g = p.to_chart((0.0, 0.0), 1.0)
    c = g.coeffs
    out1 = Poly.zero()
    out2 = Poly.zero()
    d0, d1 = c.shape
    for m in range((d0 - 1) + (d1 - 1) + 1):
        hom = np.zeros_like(c)
        found = False
        for i in range(min(m, d0 - 1) + 1):
            j = m - i
            if j < d1 and c[i, j] != 0.0:
                hom[i, j] = c[i, j]
                found = True
        if not found:
            continue
        part = perp_scale(Poly(hom)) * (1.0 / (m + 2))
        out1 = out1 + part.u1
        out2 = out2 + part.u2
    return VecPoly(out1, out2).to_chart(p.origin, p.scale)


# -- quadrature ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference triangle (0,0), (1,0), (0,1).

    ``points`` are barycentric coordinates (n, 3); weights sum to the
    reference area 1/2 and integrate all polynomials of total degree
    up to ``exactness_degree`` exactly.
    """

    points: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    exactness_degree: int

    def __len__(self):
        return len(self.weights)


def gauss01(n):
    """n-point Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def triangle_rule(d: int) -> QuadratureRule:
    """Quadrature exact on polynomials of total degree <= d.

    Built by the collapsed-square (Duffy) map x = s, y = t (1 - s) from a
    tensor Gauss grid; the (1 - s) Jacobian raises the s-degree by one, so
    d+1 points in s and ceil((d+1)/2) in t give exactness d with positive
    weights.
    """
    if not 1 <= d <= 24:
        raise ValueError(f"quadrature degree {d} outside supported range 1..24")
    ns = d + 1
    nt = (d + 2) // 2
    s, ws = gauss01(ns)
    t, wt = gauss01(nt)
    S, T = np.meshgrid(s, t, indexing="ij")
    WS, WT = np.meshgrid(ws, wt, indexing="ij")
    x = S.ravel()
    y = (T * (1.0 - S)).ravel()
    w = (WS * WT * (1.0 - S)).ravel()
    bary = np.stack([1.0 - x - y, x, y], axis=1)
    return QuadratureRule(points=bary, weights=w, exactness_degree=d)


def physical_rule(rule: QuadratureRule, verts: np.ndarray):
    """Map a reference rule to a physical triangle.

    Returns (points (n,2), weights (n,)); weights sum to the triangle area.
    """
    verts = np.asarray(verts, dtype=float)
    pts = rule.points @ verts
    det = (verts[1, 0] - verts[0, 0]) * (verts[2, 1] - verts[0, 1]) \
        - (verts[2, 0] - verts[0, 0]) * (verts[1, 1] - verts[0, 1])
    return pts, rule.weights * abs(det)


# -- edge Legendre machinery ---------------------------------------------------


def legendre01(j, t):
    """Legendre polynomial L_j(2t - 1), orthogonal on [0, 1]."""
    c = np.zeros(j + 1)
    c[j] = 1.0
    return np.polynomial.legendre.legval(2.0 * np.asarray(t) - 1.0, c)


def legendre01_matrix(up_to, t):
    """Rows L_0..L_up_to of Legendre values at parameters t, orthonormal in
    L^2(0, 1)."""
    t = np.asarray(t, dtype=float)
    out = np.empty((up_to + 1, t.size))
    for j in range(up_to + 1):
        out[j] = np.sqrt(2.0 * j + 1.0) * legendre01(j, t)
    return out


def edge_moments(trace, length, up_to, n_gauss=None):
    """Inner products of an edge trace against orthonormal Legendre modes.

    Parameters
    ----------
    trace : callable or 1D coefficient array
        Trace as a function of the edge parameter t in [0, 1]; an array is
        interpreted as polynomial coefficients in t (ascending powers).
    length : float
        Edge length; the Legendre modes are orthonormal in L^2(edge, ds).
    up_to : int
        Highest mode degree.
    """
    if n_gauss is None:
        deg = (len(trace) - 1) if not callable(trace) else 12
        n_gauss = max((deg + up_to) // 2 + 2, 6)
    t, w = gauss01(n_gauss)
    vals = trace(t) if callable(trace) else npoly.polyval(t, np.asarray(trace))
    leg = legendre01_matrix(up_to, t)
    # modes orthonormal w.r.t. arclength scale like 1/sqrt(length)
    return np.sqrt(length) * (leg * w) @ vals


def edge_moment_matrix(up_to, t, w, length):
    """Matrix M with M[j, q] = w_q * P~_j(t_q) * length / sqrt(length).

    For trace values ``v`` at the Gauss nodes, ``M @ v`` gives the moments
    against Legendre modes orthonormal in L^2(edge, ds).
    """
    leg = legendre01_matrix(up_to, t)
    return np.sqrt(length) * (leg * w)
