"""Conforming triangulations of polygonal domains.

A mesh is built once and then treated as read-only: the arrays are frozen
after construction so downstream modules (and worker threads) can share
them without copies or locks.
"""

from __future__ import annotations

import math

import numpy as np

BOUNDARY_PARTS = ("left", "right", "bottom", "top", "other")

_GEO_TOL = 1e-12


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class TriMesh:
    """Triangulation with edge topology and labeled boundary.

    Attributes:
        vertices: (nv, 2) float coordinates.
        triangles: (nt, 3) vertex indices, counterclockwise.
        edges: (ne, 2) vertex pairs with lo < hi.
        edge_tris: (ne, 2) adjacent triangle indices, -1 where absent.
        tri_edges: (nt, 3) edge id of facet m, where facet m runs from
            local vertex m to local vertex (m + 1) % 3.
        tri_neighbors: (nt, 3) triangle across facet m, -1 on the boundary.
        boundary_edges: (nb,) edge ids lying on the domain boundary.
        boundary_labels: (nb,) part label per boundary edge.
        h: maximum element diameter.
        structured_n: subdivision count for structured unit-square meshes,
            None for imported meshes.
    """

    def __init__(self, vertices, triangles, boundary_labels=None, h=None,
                 structured_n=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (nv, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (nt, 3) array")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle vertex index out of range")

        areas = self.signed_areas()
        bad = np.nonzero(areas <= 0.0)[0]
        if bad.size:
            raise MeshError(f"triangle {bad[0]} is degenerate or clockwise "
                            f"(signed area {areas[bad[0]]:g})")

        self._build_edges()
        self._label_boundary(boundary_labels)

        v = self.vertices
        t = self.triangles
        lengths = np.stack([
            np.linalg.norm(v[t[:, 1]] - v[t[:, 0]], axis=1),
            np.linalg.norm(v[t[:, 2]] - v[t[:, 1]], axis=1),
            np.linalg.norm(v[t[:, 0]] - v[t[:, 2]], axis=1),
        ])
        self.h = float(h) if h is not None else float(lengths.max())
        self.structured_n = structured_n
        self._geom = None

        nv, ne, nt = len(self.vertices), len(self.edges), len(self.triangles)
        if nv - ne + nt != 1:
            raise MeshError(f"Euler relation violated: V-E+F = {nv - ne + nt}, "
                            "expected 1 for a simply connected domain")

        for a in (self.vertices, self.triangles, self.edges, self.edge_tris,
                  self.tri_edges, self.tri_neighbors, self.boundary_edges):
            a.setflags(write=False)

    # -- topology -----------------------------------------------------------

    def _build_edges(self):
        nt = len(self.triangles)
        edge_ids = {}
        edges = []
        edge_tris = []
        tri_edges = np.empty((nt, 3), dtype=np.int64)
        for t in range(nt):
            tri = self.triangles[t]
            for m in range(3):
                a, b = int(tri[m]), int(tri[(m + 1) % 3])
                key = (a, b) if a < b else (b, a)
                eid = edge_ids.get(key)
                if eid is None:
                    eid = len(edges)
                    edge_ids[key] = eid
                    edges.append(key)
                    edge_tris.append([t, -1])
                else:
                    if edge_tris[eid][1] != -1:
                        raise MeshError(f"edge {key} referenced by more than "
                                        "two triangles")
                    edge_tris[eid][1] = t
                tri_edges[t, m] = eid
        self.edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        self.edge_tris = np.array(edge_tris, dtype=np.int64).reshape(-1, 2)
        self.tri_edges = tri_edges

        nbr = np.empty((nt, 3), dtype=np.int64)
        for t in range(nt):
            for m in range(3):
                pair = self.edge_tris[self.tri_edges[t, m]]
                nbr[t, m] = pair[1] if pair[0] == t else pair[0]
        self.tri_neighbors = nbr
        self.boundary_edges = np.nonzero(self.edge_tris[:, 1] == -1)[0]

    def _label_boundary(self, labels):
        if labels is not None:
            if len(labels) != len(self.boundary_edges):
                raise MeshError("boundary label count does not match the "
                                "number of boundary edges")
            self.boundary_labels = tuple(str(s) for s in labels)
            return
        # Geometric labeling for the unit square: a boundary edge gets the
        # part whose coordinate both endpoints share to within 1e-12.
        out = []
        for eid in self.boundary_edges:
            p, q = self.vertices[self.edges[eid]]
            if abs(p[0]) < _GEO_TOL and abs(q[0]) < _GEO_TOL:
                out.append("left")
            elif abs(p[0] - 1) < _GEO_TOL and abs(q[0] - 1) < _GEO_TOL:
                out.append("right")
            elif abs(p[1]) < _GEO_TOL and abs(q[1]) < _GEO_TOL:
                out.append("bottom")
            elif abs(p[1] - 1) < _GEO_TOL and abs(q[1] - 1) < _GEO_TOL:
                out.append("top")
            else:
                out.append("other")
        self.boundary_labels = tuple(out)

    # -- queries ------------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    def triangle_vertices(self, t):
        """Coordinates of triangle t as a (3, 2) array."""
        return self.vertices[self.triangles[t]]

    def signed_areas(self):
        v = self.vertices
        t = self.triangles
        d1 = v[t[:, 1]] - v[t[:, 0]]
        d2 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def element_maps(self):
        """Affine maps for all elements: (v0, jac, inv_jac, det_jac).

        jac columns are the edge vectors from local vertex 0, so a reference
        point (x, y) maps to v0 + jac @ (x, y). det_jac equals twice the
        element area and is positive for this mesh's orientation.
        """
        if self._geom is None:
            v = self.vertices
            t = self.triangles
            v0 = v[t[:, 0]]
            jac = np.empty((len(t), 2, 2))
            jac[:, :, 0] = v[t[:, 1]] - v0
            jac[:, :, 1] = v[t[:, 2]] - v0
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            inv = np.empty_like(jac)
            inv[:, 0, 0] = jac[:, 1, 1] / det
            inv[:, 0, 1] = -jac[:, 0, 1] / det
            inv[:, 1, 0] = -jac[:, 1, 0] / det
            inv[:, 1, 1] = jac[:, 0, 0] / det
            for a in (v0, jac, inv, det):
                a.setflags(write=False)
            self._geom = (v0, jac, inv, det)
        return self._geom

    def locate(self, points, tol=1e-12):
        """Triangle index containing each query point (-1 if outside)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        v0, _, inv, _ = self.element_maps()
        out = np.full(len(pts), -1, dtype=np.int64)
        if self.structured_n is not None:
            n = self.structured_n
            ij = np.clip(np.floor(pts * n).astype(int), 0, n - 1)
            local = pts * n - ij
            lower = local[:, 1] <= local[:, 0] + tol * n
            cell = ij[:, 1] * n + ij[:, 0]
            out = 2 * cell + np.where(lower, 0, 1)
            # Points within tol of the diagonal fall to the lower triangle.
            return out
        for i, p in enumerate(pts):
            r = np.einsum("tab,tb->ta", inv, p - v0)
            ok = (r[:, 0] >= -tol) & (r[:, 1] >= -tol) & (r.sum(1) <= 1 + tol)
            hits = np.nonzero(ok)[0]
            if hits.size:
                out[i] = hits[0]
        return out


def build_structured_mesh(n):
    """Uniform triangulation of the unit square.

    Each of the n*n grid cells is split along the lower-left to upper-right
    diagonal, giving 2*n*n counterclockwise triangles and h = sqrt(2)/n.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"subdivision count must be a positive integer, got {n!r}")
    n = int(n)
    coords = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(coords, coords)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    t = 0
    for j in range(n):
        for i in range(n):
            a = vid(i, j)
            b = vid(i + 1, j)
            c = vid(i + 1, j + 1)
            d = vid(i, j + 1)
            triangles[t] = (a, b, c)
            triangles[t + 1] = (a, c, d)
            t += 2
    return TriMesh(vertices, triangles, h=math.sqrt(2.0) / n, structured_n=n)


def edge_neighbors(mesh, triangle):
    """Neighbors of a triangle across its three facets.

    Returns a tuple with one entry per facet: the index of the triangle
    sharing that facet, or None when the facet lies on the boundary.
    """
    nt = mesh.n_triangles
    if not -nt <= triangle < nt:
        raise IndexError(f"triangle index {triangle} out of range [0, {nt})")
    row = mesh.tri_neighbors[triangle]
    return tuple(int(x) if x >= 0 else None for x in row)


def write_mesh_file(mesh, path):
    """Plain-text export: header "nv nt ne", vertex lines, triangle lines,
    then one "v0 v1 label" line per boundary edge. Indices are 0-based."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles} {len(mesh.boundary_edges)}"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    for a, b, c in mesh.triangles:
        lines.append(f"{a} {b} {c}")
    for eid, label in zip(mesh.boundary_edges, mesh.boundary_labels):
        a, b = mesh.edges[eid]
        lines.append(f"{a} {b} {label}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_mesh_file(path):
    """Inverse of write_mesh_file. Edge topology is rebuilt from the
    triangles; the listed boundary edges only provide part labels."""
    with open(path) as f:
        tokens = f.read().split("\n")
    rows = [ln.split() for ln in tokens if ln.strip()]
    nv, nt, ne = (int(x) for x in rows[0])
    if len(rows) != 1 + nv + nt + ne:
        raise MeshError(f"mesh file {path}: expected {1 + nv + nt + ne} lines, "
                        f"found {len(rows)}")
    vertices = np.array([[float(x) for x in r] for r in rows[1:1 + nv]])
    triangles = np.array([[int(x) for x in r] for r in rows[1 + nv:1 + nv + nt]])
    labeled = {}
    for r in rows[1 + nv + nt:]:
        a, b = int(r[0]), int(r[1])
        labeled[(min(a, b), max(a, b))] = r[2]
    mesh = TriMesh(vertices, triangles, boundary_labels=None)
    labels = []
    for eid in mesh.boundary_edges:
        key = tuple(int(x) for x in mesh.edges[eid])
        if key not in labeled:
            raise MeshError(f"mesh file {path}: boundary edge {key} has no label")
        labels.append(labeled.pop(key))
    if labeled:
        raise MeshError(f"mesh file {path}: listed edge {next(iter(labeled))} "
                        "is not a boundary edge of the triangulation")
    mesh.boundary_labels = tuple(labels)
    return mesh
