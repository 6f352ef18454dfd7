"""Conforming triangle meshes of the three test domains.

Domains (tags):

* ``omega1``: unit square (0,1)^2
* ``omega2``: unit square minus the rectangle (1/3,3/4) x (1/4,2/3)
* ``omega3``: L-shape (-1,1)^2 minus (0,1) x (-1,0)

The coarse meshes are fixed structured triangulations (axis-aligned cells
split along the same diagonal) so that all downstream numbers are
reproducible; ``refine_level = n`` means n uniform red refinements.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "Topology",
    "MeshError",
    "MeshParseError",
    "generate_domain",
    "refine_uniform",
    "compute_topology",
    "save_mesh",
    "load_mesh",
]

DOMAIN_AREAS = {
    "omega1": 1.0,
    "omega2": 1.0 - (3.0 / 4.0 - 1.0 / 3.0) * (2.0 / 3.0 - 1.0 / 4.0),
    "omega3": 3.0,
}


class MeshError(ValueError):
    """Invalid mesh (orientation, conformity, connectivity)."""


class MeshParseError(MeshError):
    """Malformed mesh file; carries the offending line number."""

    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class Mesh:
    """Immutable conforming triangulation with oriented edge topology.

    Attributes
    ----------
    vertices : ndarray (nv, 2)
    triangles : ndarray (nt, 3), counterclockwise vertex triples
    edges : ndarray (ne, 2), vertex pairs with ``edges[:, 0] < edges[:, 1]``
    edge_tris : ndarray (ne, 2), adjacent triangle ids, -1 past the boundary
    tri_edges : ndarray (nt, 3), edge id of local edges (v0v1, v1v2, v2v0)
    boundary_edges : ndarray, edge ids on the boundary
    boundary_marker : dict edge id -> 'outer' | 'hole'
    domain_tag : str, one of omega1/omega2/omega3/external
    refine_level : int
    """

    def __init__(self, vertices, triangles, domain_tag="external",
                 refine_level=0, boundary_marker=None):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
        self.triangles = np.asarray(triangles, dtype=int).reshape(-1, 3)
        self.domain_tag = domain_tag
        self.refine_level = int(refine_level)

        areas = signed_areas(self.vertices, self.triangles)
        if np.any(areas <= 0.0):
            bad = np.nonzero(areas <= 0.0)[0]
            raise MeshError(f"{bad.size} non-counterclockwise triangle(s), "
                            f"first at index {bad[0]}")

        self.edges, self.edge_tris, self.tri_edges = _edge_topology(self.triangles)
        counts = (self.edge_tris >= 0).sum(axis=1)
        if np.any(counts > 2):
            raise MeshError("non-manifold edge shared by more than two triangles")
        self.boundary_edges = np.nonzero(counts == 1)[0]
        _check_hanging_nodes(self.vertices, self.edges, self.boundary_edges)

        if boundary_marker is None:
            boundary_marker = _default_markers(self.vertices, self.edges,
                                               self.boundary_edges)
        self.boundary_marker = dict(boundary_marker)

        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def triangle_coords(self, t):
        """Vertex coordinates of triangle t, shape (3, 2)."""
        return self.vertices[self.triangles[t]]

    def edge_coords(self, e):
        return self.vertices[self.edges[e]]

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def areas(self):
        return signed_areas(self.vertices, self.triangles)

    def __repr__(self):
        return (f"Mesh({self.domain_tag}, level={self.refine_level}, "
                f"V={self.num_vertices}, E={self.num_edges}, "
                f"T={self.num_triangles})")


@dataclass
class Topology:
    """Connectivity invariants of a connected planar mesh."""

    betti1: int
    boundary_components: int
    vertex_star: list = field(repr=False)
    edge_signs: np.ndarray = field(repr=False)


def signed_areas(vertices, triangles):
    p = vertices[triangles]
    return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))


def _edge_topology(triangles):
    nt = triangles.shape[0]
    local = np.stack([triangles[:, [0, 1]],
                      triangles[:, [1, 2]],
                      triangles[:, [2, 0]]], axis=1).reshape(-1, 2)
    key = np.sort(local, axis=1)
    edges, inverse = np.unique(key, axis=0, return_inverse=True)
    tri_edges = inverse.reshape(nt, 3)
    edge_tris = -np.ones((edges.shape[0], 2), dtype=int)
    for t in range(nt):
        for e in tri_edges[t]:
            if edge_tris[e, 0] < 0:
                edge_tris[e, 0] = t
            elif edge_tris[e, 1] < 0:
                edge_tris[e, 1] = t
            else:
                edge_tris[e, 1] = -2  # flagged: checked by caller
    return edges, edge_tris, tri_edges


def _check_hanging_nodes(vertices, edges, boundary_edges):
    # a vertex strictly inside some edge breaks conformity
    scale = max(np.ptp(vertices[:, 0]), np.ptp(vertices[:, 1]), 1.0)
    tol = 1e-12 * scale
    for e in range(edges.shape[0]):
        a, b = edges[e]
        pa, pb = vertices[a], vertices[b]
        d = pb - pa
        L2 = d @ d
        rel = vertices - pa
        t = (rel @ d) / L2
        cross = rel[:, 0] * d[1] - rel[:, 1] * d[0]
        on = (np.abs(cross) < tol * np.sqrt(L2)) & (t > 1e-10) & (t < 1 - 1e-10)
        on[[a, b]] = False
        if np.any(on):
            v = np.nonzero(on)[0][0]
            raise MeshError(f"hanging node: vertex {v} lies inside edge "
                            f"({a}, {b})")


def _boundary_cycles(edges, boundary_edges):
    """Split boundary edges into closed cycles (lists of edge ids)."""
    incident = {}
    for e in boundary_edges:
        for v in edges[e]:
            incident.setdefault(int(v), []).append(int(e))
    for v, es in incident.items():
        if len(es) != 2:
            raise MeshError(f"boundary vertex {v} has {len(es)} boundary edges")
    cycles = []
    seen = set()
    for e0 in boundary_edges:
        e0 = int(e0)
        if e0 in seen:
            continue
        cycle = [e0]
        seen.add(e0)
        v = int(edges[e0, 1])
        while True:
            nxt = [e for e in incident[v] if e not in seen]
            if not nxt:
                break
            e = nxt[0]
            seen.add(e)
            cycle.append(e)
            a, b = edges[e]
            v = int(b) if int(a) == v else int(a)
        cycles.append(cycle)
    return cycles


def _default_markers(vertices, edges, boundary_edges):
    cycles = _boundary_cycles(edges, boundary_edges)
    # outer loop contains the lexicographically smallest boundary vertex
    def cycle_min(cyc):
        vs = np.unique(edges[cyc].ravel())
        pts = vertices[vs]
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        return tuple(pts[order[0]])

    outer = min(range(len(cycles)), key=lambda i: cycle_min(cycles[i]))
    marker = {}
    for i, cyc in enumerate(cycles):
        name = "outer" if i == outer else "hole"
        for e in cyc:
            marker[int(e)] = name
    return marker


def _cells_to_mesh(xs, ys, skip, domain_tag):
    nx, ny = len(xs), len(ys)
    vid = lambda i, j: i * ny + j
    vertices = np.array([[xs[i], ys[j]] for i in range(nx) for j in range(ny)])
    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            if (i, j) in skip:
                continue
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    tris = np.array(tris, dtype=int)
    used = np.unique(tris)
    remap = -np.ones(vertices.shape[0], dtype=int)
    remap[used] = np.arange(used.size)
    return Mesh(vertices[used], remap[tris], domain_tag=domain_tag)


def generate_domain(domain_tag: str, refine_level: int = 0) -> Mesh:
    """Structured coarse mesh of a test domain, refined uniformly.

    Hole corners of omega2 (x = 1/3, 3/4 and y = 1/4, 2/3) are grid lines of
    the coarse mesh so the boundary is represented exactly.
    """
    if refine_level < 0:
        raise ValueError("refine_level must be >= 0")
    if domain_tag == "omega1":
        # 3x3 cells: coarse enough to be a genuine level 0, fine enough that
        # one refinement resolves the first eight eigenvalues to ~1e-5
        grid = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]
        mesh = _cells_to_mesh(grid, grid, set(), domain_tag)
    elif domain_tag == "omega2":
        mesh = _cells_to_mesh([0.0, 1.0 / 3.0, 3.0 / 4.0, 1.0],
                              [0.0, 1.0 / 4.0, 2.0 / 3.0, 1.0],
                              {(1, 1)}, domain_tag)
    elif domain_tag == "omega3":
        mesh = _cells_to_mesh([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0],
                              {(1, 0)}, domain_tag)
    else:
        raise ValueError(f"unknown domain tag {domain_tag!r}")
    for _ in range(refine_level):
        mesh = refine_uniform(mesh)
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle split into 4 by edge midpoints."""
    nv = mesh.num_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    mid = nv + np.arange(mesh.num_edges)
    t = mesh.triangles
    m01 = mid[mesh.tri_edges[:, 0]]
    m12 = mid[mesh.tri_edges[:, 1]]
    m20 = mid[mesh.tri_edges[:, 2]]
    tris = np.vstack([
        np.column_stack([t[:, 0], m01, m20]),
        np.column_stack([t[:, 1], m12, m01]),
        np.column_stack([t[:, 2], m20, m12]),
        np.column_stack([m01, m12, m20]),
    ])
    # children of boundary edges inherit the parent marker
    marker = {}
    for e, name in mesh.boundary_marker.items():
        a, b = mesh.edges[e]
        for pair in ((int(a), int(mid[e])), (int(b), int(mid[e]))):
            marker[tuple(sorted(pair))] = name
    new = Mesh(vertices, tris, domain_tag=mesh.domain_tag,
               refine_level=mesh.refine_level + 1, boundary_marker={})
    bm = {}
    for e in new.boundary_edges:
        key = (int(new.edges[e, 0]), int(new.edges[e, 1]))
        bm[int(e)] = marker.get(key, "outer")
    new.boundary_marker = bm
    return new


def compute_topology(mesh: Mesh) -> Topology:
    """First Betti number, boundary components, stars and edge signs.

    Rejects disconnected meshes; for connected planar meshes
    ``betti1 = 1 - (V - E + F) = boundary_components - 1``.
    """
    # connectivity over the triangle adjacency graph
    nv = mesh.num_vertices
    parent = np.arange(nv)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in mesh.edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    if len({find(v) for v in range(nv)}) != 1:
        raise MeshError("disconnected mesh")

    chi = mesh.num_vertices - mesh.num_edges + mesh.num_triangles
    betti1 = 1 - chi
    cycles = _boundary_cycles(mesh.edges, mesh.boundary_edges)

    star = [[] for _ in range(nv)]
    for t, tri in enumerate(mesh.triangles):
        for v in tri:
            star[v].append(t)

    signs = np.zeros_like(mesh.edge_tris)
    for t, tri in enumerate(mesh.triangles):
        for loc in range(3):
            a, b = tri[loc], tri[(loc + 1) % 3]
            e = mesh.tri_edges[t, loc]
            s = 1 if a < b else -1
            if mesh.edge_tris[e, 0] == t:
                signs[e, 0] = s
            else:
                signs[e, 1] = s

    topo = Topology(betti1=betti1, boundary_components=len(cycles),
                    vertex_star=star, edge_signs=signs)
    if topo.betti1 != topo.boundary_components - 1:
        raise MeshError("Euler count inconsistent with boundary components")
    return topo


def save_mesh(mesh: Mesh, path) -> None:
    """ASCII format: counts line 'nv nt nbe', vertices, CCW triangles,
    boundary edges as 'i j marker'."""
    lines = [f"{mesh.num_vertices} {mesh.num_triangles} "
             f"{mesh.boundary_edges.size}"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    for i, j, k in mesh.triangles:
        lines.append(f"{i} {j} {k}")
    for e in mesh.boundary_edges:
        i, j = mesh.edges[e]
        lines.append(f"{i} {j} {mesh.boundary_marker.get(int(e), 'outer')}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    """Read the text format written by save_mesh.

    Clockwise triangles are re-oriented with a warning; hanging nodes and
    non-manifold edges are rejected.  '#' starts a comment.
    """
    rows = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                rows.append((lineno, text.split()))

    def take(expect=None):
        if not rows:
            raise MeshParseError(0, "unexpected end of file")
        return rows.pop(0)

    lineno, head = take()
    if len(head) != 3:
        raise MeshParseError(lineno, "counts line must hold 3 integers")
    try:
        nv, nt, nbe = (int(v) for v in head)
    except ValueError:
        raise MeshParseError(lineno, "counts line must hold 3 integers")

    def parse_block(n, width, conv, what):
        out = []
        for _ in range(n):
            lineno, parts = take()
            if len(parts) < width:
                raise MeshParseError(lineno, f"{what}: expected {width} fields")
            try:
                out.append([conv(p) for p in parts[:width]])
            except ValueError:
                raise MeshParseError(lineno, f"{what}: bad value")
        return out

    verts = np.array(parse_block(nv, 2, float, "vertex"), dtype=float)
    tris = np.array(parse_block(nt, 3, int, "triangle"), dtype=int)
    be = []
    for _ in range(nbe):
        lineno, parts = take()
        if len(parts) != 3:
            raise MeshParseError(lineno, "boundary edge: expected 'i j marker'")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise MeshParseError(lineno, "boundary edge: bad vertex index")
        if parts[2] not in ("outer", "hole"):
            raise MeshParseError(lineno, f"unknown marker {parts[2]!r}")
        be.append((i, j, parts[2]))

    if np.any(tris < 0) or np.any(tris >= nv):
        raise MeshError("triangle vertex index out of range")
    areas = signed_areas(verts, tris)
    flipped = np.nonzero(areas < 0.0)[0]
    if np.any(areas == 0.0):
        raise MeshError("degenerate (zero-area) triangle")
    if flipped.size:
        warnings.warn(f"re-oriented {flipped.size} clockwise triangle(s)")
        tris = tris.copy()
        tris[flipped] = tris[flipped][:, [0, 2, 1]]

    mesh = Mesh(verts, tris, domain_tag="external", boundary_marker={})
    file_be = {tuple(sorted((i, j))): m for i, j, m in be}
    mesh_be = {tuple(int(v) for v in mesh.edges[e]): int(e)
               for e in mesh.boundary_edges}
    if set(file_be) != set(mesh_be):
        raise MeshError("boundary edge list inconsistent with triangulation")
    mesh.boundary_marker = {mesh_be[k]: m for k, m in file_be.items()}
    return mesh
