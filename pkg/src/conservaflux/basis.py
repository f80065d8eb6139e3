"""Lagrange reference elements on the unit triangle, degrees 1 to 3.

Node ordering per degree: the three vertices (0,0), (1,0), (0,1), then the
edge nodes walking edges (v0,v1), (v1,v2), (v2,v0) away from the first
vertex of each edge, then the interior node (cubic only).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

DEGREES = (1, 2, 3)
N_NODES = {1: 3, 2: 6, 3: 10}

_EDGE_PAIRS = ((0, 1), (1, 2), (2, 0))

# Barycentric gradients on the reference triangle.
_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def _check_degree(degree):
    if degree not in N_NODES:
        raise ValueError(f"unsupported degree {degree!r}; supported: 1, 2, 3")


@lru_cache(maxsize=None)
def node_lattice(degree):
    """Integer lattice positions (i, j) of the nodes; coordinates are (i, j)/k."""
    _check_degree(degree)
    k = degree
    verts = [(0, 0), (k, 0), (0, k)]
    lattice = list(verts)
    for a, b in _EDGE_PAIRS:
        pa, pb = verts[a], verts[b]
        for j in range(1, k):
            lattice.append((pa[0] + (pb[0] - pa[0]) * j // k,
                            pa[1] + (pb[1] - pa[1]) * j // k))
    for i in range(1, k):
        for j in range(1, k - i):
            lattice.append((i, j))
    return tuple(lattice)


@lru_cache(maxsize=None)
def ref_nodes(degree):
    """Reference coordinates of the nodal points, shape (N, 2)."""
    pts = np.array(node_lattice(degree), dtype=float) / degree
    pts.setflags(write=False)
    return pts


def eval_basis(degree, points):
    """Nodal basis values and gradients at reference points.

    Returns (values, gradients) with shapes (P, N) and (P, N, 2). The basis
    satisfies the Kronecker property at the nodes, sums to one, and its
    gradients sum to zero at every point.
    """
    _check_degree(degree)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    lam = np.stack([1.0 - x - y, x, y], axis=1)          # (P, 3)
    npts = len(pts)
    n = N_NODES[degree]
    vals = np.empty((npts, n))
    grads = np.empty((npts, n, 2))

    if degree == 1:
        vals[:] = lam
        grads[:] = _DL[None, :, :]
        return vals, grads

    if degree == 2:
        for i in range(3):
            li = lam[:, i]
            vals[:, i] = li * (2.0 * li - 1.0)
            grads[:, i] = (4.0 * li - 1.0)[:, None] * _DL[i]
        for m, (a, b) in enumerate(_EDGE_PAIRS):
            la, lb = lam[:, a], lam[:, b]
            vals[:, 3 + m] = 4.0 * la * lb
            grads[:, 3 + m] = 4.0 * (lb[:, None] * _DL[a] + la[:, None] * _DL[b])
        return vals, grads

    for i in range(3):
        li = lam[:, i]
        vals[:, i] = 0.5 * li * (3.0 * li - 1.0) * (3.0 * li - 2.0)
        grads[:, i] = (0.5 * (27.0 * li * li - 18.0 * li + 2.0))[:, None] * _DL[i]
    for m, (a, b) in enumerate(_EDGE_PAIRS):
        la, lb = lam[:, a], lam[:, b]
        c = 3 + 2 * m
        vals[:, c] = 4.5 * la * lb * (3.0 * la - 1.0)
        grads[:, c] = 4.5 * ((lb * (6.0 * la - 1.0))[:, None] * _DL[a]
                             + (la * (3.0 * la - 1.0))[:, None] * _DL[b])
        vals[:, c + 1] = 4.5 * la * lb * (3.0 * lb - 1.0)
        grads[:, c + 1] = 4.5 * ((lb * (3.0 * lb - 1.0))[:, None] * _DL[a]
                                 + (la * (6.0 * lb - 1.0))[:, None] * _DL[b])
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    vals[:, 9] = 27.0 * l0 * l1 * l2
    grads[:, 9] = 27.0 * ((l1 * l2)[:, None] * _DL[0]
                          + (l0 * l2)[:, None] * _DL[1]
                          + (l0 * l1)[:, None] * _DL[2])
    return vals, grads


def map_to_element(mesh, triangle, ref_points):
    """Affine image of reference points in a physical triangle.

    Returns (physical points, jacobian, det) where det equals twice the
    element area. Physical gradients are inv(J).T @ reference gradients.
    """
    nt = mesh.n_triangles
    if not 0 <= triangle < nt:
        raise IndexError(f"triangle index {triangle} out of range [0, {nt})")
    v0, jac, _, det = mesh.element_maps()
    d = float(det[triangle])
    if abs(d) < 1e-14 * mesh.h ** 2:
        raise ValueError(f"triangle {triangle} is degenerate (|det J| = {d:g})")
    pts = np.atleast_2d(np.asarray(ref_points, dtype=float))
    phys = v0[triangle] + pts @ jac[triangle].T
    return phys, jac[triangle], d
