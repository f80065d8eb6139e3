"""Subcell partitions and nodal control volumes on triangular elements.

Each element is split into degree^2 congruent sub-triangles (edge midpoints
for quadratics, edge trisection for cubics); inside every sub-triangle the
barycenter is joined to the edge midpoints. The three quadrilaterals this
creates are assigned to the sub-triangle's corner nodes, and the union of a
node's quadrilaterals is its subcell polygonal. Gluing the subcells of one
global degree of freedom across elements yields its control volume.

Subcell boundary segments come in two classes:
  * "cv"      - dual segments interior to the element; these tile the part
                of the control-volume boundary crossing this element.
  * "element" - segments on the element boundary; across a shared facet the
                neighboring element contributes the matching subcell, so
                these are interior to the control volume (or lie on the
                domain boundary).

The whole construction is affine: it is tabulated once per degree on the
reference triangle and mapped through each element's jacobian.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import basis
from .quadrature import triangle_rule

CLASS_CONTROL_VOLUME = "cv"
CLASS_ELEMENT_BOUNDARY = "element"


class DualMeshError(Exception):
    """Inconsistent control-volume geometry."""


def _rot(v):
    """Rotate by -90 degrees: outward normal direction of a CCW-oriented edge."""
    out = np.empty_like(v)
    out[..., 0] = v[..., 1]
    out[..., 1] = -v[..., 0]
    return out


def _shoelace(loop):
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


@dataclass(frozen=True)
class _RefDual:
    """Reference-triangle tabulation of the subcell construction for one degree.

    Control-volume segments are stored once per geometric segment, oriented
    counterclockwise for `cv_plus` (so the rotated direction is that owner's
    outward normal); `cv_minus` is the owner on the other side.
    """
    degree: int
    nodes: np.ndarray        # (N, 2)
    cv_start: np.ndarray     # (S, 2)
    cv_end: np.ndarray       # (S, 2)
    cv_plus: np.ndarray      # (S,)
    cv_minus: np.ndarray     # (S,)
    bd_start: np.ndarray     # (B, 2)
    bd_end: np.ndarray       # (B, 2)
    bd_owner: np.ndarray     # (B,)
    bd_facet: np.ndarray     # (B,)
    areas: np.ndarray        # (N,) subcell areas, sum = 1/2
    loops: tuple             # per node, (m, 2) CCW polygon loop
    quad_tris: np.ndarray    # (T, 3, 2) triangulated subcells for quadrature
    quad_owner: np.ndarray   # (T,)


def _facet_of(lat_a, lat_b, k):
    """Facet id if the lattice segment lies on the reference boundary, else -1."""
    if lat_a[1] == 0 and lat_b[1] == 0:
        return 0
    if lat_a[0] + lat_a[1] == k and lat_b[0] + lat_b[1] == k:
        return 1
    if lat_a[0] == 0 and lat_b[0] == 0:
        return 2
    return -1


@lru_cache(maxsize=None)
def _ref_dual(degree):
    k = degree
    lattice = basis.node_lattice(k)
    index = {p: i for i, p in enumerate(lattice)}
    xy = basis.ref_nodes(k)
    n = basis.N_NODES[k]

    subtris = []
    for i in range(k):
        for j in range(k - i):
            subtris.append(((i, j), (i + 1, j), (i, j + 1)))
    for i in range(k - 1):
        for j in range(k - 1 - i):
            subtris.append(((i + 1, j), (i + 1, j + 1), (i, j + 1)))

    cv_start, cv_end, cv_plus, cv_minus = [], [], [], []
    bd_start, bd_end, bd_owner, bd_facet = [], [], [], []
    quad_tris, quad_owner = [], []
    areas = np.zeros(n)
    loop_edges = [[] for _ in range(n)]

    for lat in subtris:
        ids = [index[p] for p in lat]
        p = [xy[i] for i in ids]
        bc = (p[0] + p[1] + p[2]) / 3.0
        mids = [(p[a] + p[b]) / 2.0 for a, b in ((0, 1), (1, 2), (2, 0))]

        # Dual segments: midpoint of sub-edge m to the barycenter. CCW for
        # the corner preceding the sub-edge, clockwise for the one after it.
        for m in range(3):
            plus, minus = ids[m], ids[(m + 1) % 3]
            cv_start.append(mids[m])
            cv_end.append(bc)
            cv_plus.append(plus)
            cv_minus.append(minus)
            loop_edges[plus].append((mids[m], bc))
            loop_edges[minus].append((bc, mids[m]))

        for c in range(3):
            owner = ids[c]
            m_next = mids[c]            # midpoint of sub-edge (c, c+1)
            m_prev = mids[(c + 2) % 3]  # midpoint of sub-edge (c-1, c)
            quad = np.array([p[c], m_next, bc, m_prev])
            areas[owner] += _shoelace(quad)
            quad_tris.append(np.array([p[c], m_next, bc]))
            quad_tris.append(np.array([p[c], bc, m_prev]))
            quad_owner += [owner, owner]

            # Half-edges of the sub-triangle boundary. Interior ones separate
            # two quadrilaterals of the same node and are dropped.
            fct = _facet_of(lat[c], lat[(c + 1) % 3], k)
            if fct >= 0:
                bd_start.append(p[c])
                bd_end.append(m_next)
                bd_owner.append(owner)
                bd_facet.append(fct)
                loop_edges[owner].append((p[c], m_next))
            fct = _facet_of(lat[(c + 2) % 3], lat[c], k)
            if fct >= 0:
                bd_start.append(m_prev)
                bd_end.append(p[c])
                bd_owner.append(owner)
                bd_facet.append(fct)
                loop_edges[owner].append((m_prev, p[c]))

    loops = tuple(_chain_loop(edges) for edges in loop_edges)

    ref = _RefDual(
        degree=k,
        nodes=xy,
        cv_start=np.array(cv_start), cv_end=np.array(cv_end),
        cv_plus=np.array(cv_plus, dtype=np.int64),
        cv_minus=np.array(cv_minus, dtype=np.int64),
        bd_start=np.array(bd_start), bd_end=np.array(bd_end),
        bd_owner=np.array(bd_owner, dtype=np.int64),
        bd_facet=np.array(bd_facet, dtype=np.int64),
        areas=areas,
        loops=loops,
        quad_tris=np.array(quad_tris),
        quad_owner=np.array(quad_owner, dtype=np.int64),
    )
    assert abs(ref.areas.sum() - 0.5) < 1e-14
    return ref


def _chain_loop(edges):
    """Chain directed edges into a single closed CCW polygon loop."""
    def key(pt):
        return (round(float(pt[0]), 12), round(float(pt[1]), 12))

    succ = {}
    for a, b in edges:
        succ[key(a)] = (key(b), a)
    start = next(iter(succ))
    loop = []
    cur = start
    for _ in range(len(edges)):
        nxt, pt = succ.pop(cur)
        loop.append(pt)
        cur = nxt
    if cur != start or succ:
        raise DualMeshError("subcell boundary does not chain into one loop")
    return np.array(loop)


@lru_cache(maxsize=None)
def subcell_quadrature(degree, exactness):
    """Composite rule over the subcell pieces of the reference triangle.

    Returns (points, weights, owner): the base triangle rule mapped into the
    two triangles of every quadrilateral, with the subcell node owning each
    point. Weights sum to the reference area 1/2, and restricting to one
    owner integrates exactly over that node's polygonal.
    """
    ref = _ref_dual(degree)
    base = triangle_rule(exactness)
    npts = len(base.weights)
    tris = ref.quad_tris
    ntri = len(tris)
    b = np.stack([tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]], axis=2)
    det = b[:, 0, 0] * b[:, 1, 1] - b[:, 0, 1] * b[:, 1, 0]
    pts = tris[:, None, 0, :] + np.einsum("tab,qb->tqa", b, base.points)
    w = base.weights[None, :] * det[:, None]  # area ratio vs the reference
    owner = np.repeat(ref.quad_owner, npts)
    pts = pts.reshape(ntri * npts, 2)
    w = w.reshape(ntri * npts)
    pts.setflags(write=False)
    w.setflags(write=False)
    owner.setflags(write=False)
    return pts, w, owner


@dataclass
class SubcellPartition:
    """Physical subcell geometry of one element.

    Segment arrays hold one row per (owner, segment) pair: control-volume
    segments appear twice with opposite normals (once per adjacent subcell),
    element-boundary segments once. Normals are unit outward with respect
    to the owning subcell. `loops` are CCW vertex loops of the polygonals.
    """
    element: int
    degree: int
    node_coords: np.ndarray   # (N, 2)
    areas: np.ndarray         # (N,)
    seg_start: np.ndarray     # (M, 2)
    seg_end: np.ndarray       # (M, 2)
    seg_owner: np.ndarray     # (M,)
    seg_class: np.ndarray     # (M,) "cv" | "element"
    seg_facet: np.ndarray     # (M,) facet id, -1 for cv segments
    seg_length: np.ndarray    # (M,)
    seg_normal: np.ndarray    # (M, 2)
    loops: tuple

    @property
    def n_nodes(self):
        return len(self.areas)

    def segments_of(self, local_node, seg_class=None):
        """Indices of the boundary segments of one subcell polygonal."""
        mask = self.seg_owner == local_node
        if seg_class is not None:
            mask &= self.seg_class == seg_class
        return np.nonzero(mask)[0]


class DualGeometry:
    """Subcell partitions of every element of a mesh, for one degree.

    Behaves as a read-only sequence of SubcellPartition objects while
    keeping the shared reference tabulation and the element jacobians
    available to vectorized assembly loops.
    """

    def __init__(self, mesh, degree):
        if degree not in basis.N_NODES:
            raise ValueError(f"unsupported degree {degree!r}; supported: 1, 2, 3")
        self.mesh = mesh
        self.degree = degree
        self.ref = _ref_dual(degree)
        self.v0, self.jac, self.inv_jac, self.det_jac = mesh.element_maps()

    def __len__(self):
        return self.mesh.n_triangles

    def __getitem__(self, t):
        nt = self.mesh.n_triangles
        if not 0 <= t < nt:
            raise IndexError(f"triangle index {t} out of range [0, {nt})")
        ref = self.ref
        det = float(self.det_jac[t])
        if abs(det) < 1e-14 * self.mesh.h ** 2:
            raise ValueError(f"triangle {t} is degenerate (|det J| = {det:g})")
        J = self.jac[t]
        v0 = self.v0[t]

        ns, nb = len(ref.cv_start), len(ref.bd_start)
        start = np.vstack([ref.cv_start, ref.cv_start, ref.bd_start]) @ J.T + v0
        end = np.vstack([ref.cv_end, ref.cv_end, ref.bd_end]) @ J.T + v0
        # Second cv block: the minus-owner side, with swapped endpoints.
        start[ns:2 * ns], end[ns:2 * ns] = end[ns:2 * ns].copy(), start[ns:2 * ns].copy()
        owner = np.concatenate([ref.cv_plus, ref.cv_minus, ref.bd_owner])
        facet = np.concatenate([np.full(2 * ns, -1, dtype=np.int64), ref.bd_facet])
        cls = np.array([CLASS_CONTROL_VOLUME] * (2 * ns)
                       + [CLASS_ELEMENT_BOUNDARY] * nb)
        d = end - start
        length = np.hypot(d[:, 0], d[:, 1])
        normal = _rot(d) / length[:, None]
        return SubcellPartition(
            element=t,
            degree=self.degree,
            node_coords=ref.nodes @ J.T + v0,
            areas=ref.areas * det,
            seg_start=start, seg_end=end,
            seg_owner=owner, seg_class=cls, seg_facet=facet,
            seg_length=length, seg_normal=normal,
            loops=tuple(lp @ J.T + v0 for lp in ref.loops),
        )


def build_partitions(mesh, degree):
    """Subcell partitions for all elements (shared reference tabulation)."""
    return DualGeometry(mesh, degree)


def build_subcell_partition(mesh, triangle, degree):
    """Subcell partition of a single element."""
    return DualGeometry(mesh, degree)[triangle]


@dataclass
class ControlVolumeIndex:
    """Assembly of control volumes from per-element subcells.

    For global dof g, members(g) lists the (element, local node) pairs whose
    subcells tile the control volume; `areas[g]` is its area.
    """
    offsets: np.ndarray      # (ndofs + 1,)
    elements: np.ndarray     # flat element ids
    local_nodes: np.ndarray  # flat local node ids
    areas: np.ndarray        # (ndofs,)

    @property
    def n_dofs(self):
        return len(self.areas)

    @property
    def counts(self):
        return np.diff(self.offsets)

    def members(self, dof):
        sl = slice(self.offsets[dof], self.offsets[dof + 1])
        return self.elements[sl], self.local_nodes[sl]


def build_cv_index(mesh, dofmap, partitions, tol=1e-12):
    """Group subcells by global dof and validate shared-facet geometry.

    The element-boundary segments contributed by the two elements of an
    interior facet must split the facet at the same points; a mismatch
    beyond `tol` (relative to the mesh size) raises DualMeshError.
    """
    geo = _as_geometry(mesh, partitions, dofmap.degree)
    ref = geo.ref
    nt = mesh.n_triangles
    cell_dofs = dofmap.cell_dofs

    order = np.argsort(cell_dofs.ravel(), kind="stable")
    elements = (order // cell_dofs.shape[1]).astype(np.int64)
    local_nodes = (order % cell_dofs.shape[1]).astype(np.int64)
    counts = np.bincount(cell_dofs.ravel(), minlength=dofmap.n_dofs)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    areas = np.zeros(dofmap.n_dofs)
    np.add.at(areas, cell_dofs.ravel(),
              (ref.areas[None, :] * geo.det_jac[:, None]).ravel())

    _check_facet_splits(mesh, geo, tol)

    return ControlVolumeIndex(offsets=offsets, elements=elements,
                              local_nodes=local_nodes, areas=areas)


def _as_geometry(mesh, partitions, degree):
    if isinstance(partitions, DualGeometry):
        if partitions.mesh is not mesh or partitions.degree != degree:
            raise DualMeshError("partitions built for a different mesh or degree")
        return partitions
    return DualGeometry(mesh, degree)


def _check_facet_splits(mesh, geo, tol):
    ref = geo.ref
    mid_ref = 0.5 * (ref.bd_start + ref.bd_end)              # (B, 2)
    mids = geo.v0[:, None, :] + np.einsum("tab,sb->tsa", geo.jac, mid_ref)
    eids = mesh.tri_edges[:, ref.bd_facet]                   # (nt, B)
    p0 = mesh.vertices[mesh.edges[:, 0]]
    dvec = mesh.vertices[mesh.edges[:, 1]] - p0
    dlen2 = np.einsum("ea,ea->e", dvec, dvec)
    rel = mids - p0[eids]
    params = np.einsum("tsa,tsa->ts", rel, dvec[eids]) / dlen2[eids]

    by_edge = {}
    flat_eids = eids.ravel()
    flat_params = params.ravel()
    for e, p in zip(flat_eids, flat_params):
        by_edge.setdefault(int(e), []).append(float(p))
    interior = set(int(e) for e in np.nonzero(mesh.edge_tris[:, 1] >= 0)[0])
    for e, plist in by_edge.items():
        plist.sort()
        if e in interior:
            if len(plist) % 2:
                raise DualMeshError(f"facet {e}: odd subcell segment count")
            a = np.array(plist[0::2])
            b = np.array(plist[1::2])
            if np.any(np.abs(a - b) > tol):
                raise DualMeshError(
                    f"facet {e}: subcell splits from the two sides disagree "
                    f"(max mismatch {np.abs(a - b).max():.3e})")


def export_dual_csv(partitions, path):
    """Write all subcell boundary segments as
    "x0,y0,x1,y1,class,element,local_dof" rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x0", "y0", "x1", "y1", "class", "element", "local_dof"])
        for part in partitions:
            for i in range(len(part.seg_owner)):
                writer.writerow([
                    repr(float(part.seg_start[i, 0])),
                    repr(float(part.seg_start[i, 1])),
                    repr(float(part.seg_end[i, 0])),
                    repr(float(part.seg_end[i, 1])),
                    part.seg_class[i],
                    part.element,
                    int(part.seg_owner[i]),
                ])
