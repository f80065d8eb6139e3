"""Global continuous Galerkin assembly and solve.

The weak form is a(u, w) = int kappa grad(u).grad(w), l(w) = int f w, posed
on C0 Lagrange spaces of degree 1 to 3. Dirichlet conditions are imposed by
row/column elimination, which keeps the constrained matrix symmetric and
leaves the interior equations exactly satisfied by the solution.

Source-term integrals are evaluated on the composite subcell quadrature of
the dual partition rather than on a single element-level rule. The flux
recovery postprocessor integrates f over subcell polygonals, and using one
shared rule keeps the elemental compatibility sums at rounding level
instead of at quadrature-error level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import basis, dualmesh
from .quadrature import triangle_rule

DOF_VERTEX, DOF_EDGE, DOF_INTERIOR = 0, 1, 2
DOF_KIND_NAMES = {DOF_VERTEX: "vertex", DOF_EDGE: "edge", DOF_INTERIOR: "interior"}


class SolverError(Exception):
    """Assembly or solve failure."""


def default_exactness(degree):
    """Default triangle-rule exactness: 2k + 2 leaves quadrature error well
    below the discretization error for the coefficients used here."""
    return 2 * degree + 2


def default_segment_points(degree):
    """Default Gauss point count for boundary-segment integrals."""
    return degree + 2


@dataclass
class DofMap:
    """Global Lagrange degree-of-freedom numbering for one mesh and degree.

    Dofs are ordered vertices first, then edge dofs (edge index major,
    position along the edge minor), then element-interior dofs. Shared dofs
    receive the same global index from every adjacent element, which is
    what makes the space C0-conforming.
    """
    mesh: object
    degree: int
    n_dofs: int
    cell_dofs: np.ndarray      # (nt, N) local -> global
    coords: np.ndarray         # (ndofs, 2)
    kind: np.ndarray           # (ndofs,) vertex / edge / interior
    on_part: dict              # part label -> bool mask over dofs
    on_boundary: np.ndarray    # (ndofs,) geometric boundary membership

    @property
    def boundary_parts(self):
        return set(self.on_part)

    def interior_dofs(self):
        return np.nonzero(~self.on_boundary)[0]


def build_dof_map(mesh, degree):
    if degree not in basis.N_NODES:
        raise ValueError(f"unsupported degree {degree!r}; supported: 1, 2, 3")
    k = degree
    nv, ne, nt = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
    n_edge_dofs = (k - 1) * ne
    n_interior = nt if k == 3 else 0
    n_dofs = nv + n_edge_dofs + n_interior

    cell_dofs = np.empty((nt, basis.N_NODES[k]), dtype=np.int64)
    cell_dofs[:, :3] = mesh.triangles
    if k >= 2:
        for m, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
            va = mesh.triangles[:, a]
            eid = mesh.tri_edges[:, m]
            forward = va == mesh.edges[eid, 0]
            for j in range(1, k):
                col = 3 + m * (k - 1) + (j - 1)
                slot = np.where(forward, j - 1, k - 1 - j)
                cell_dofs[:, col] = nv + eid * (k - 1) + slot
    if k == 3:
        cell_dofs[:, 9] = nv + n_edge_dofs + np.arange(nt)

    coords = np.empty((n_dofs, 2))
    coords[:nv] = mesh.vertices
    kind = np.empty(n_dofs, dtype=np.int64)
    kind[:nv] = DOF_VERTEX
    if k >= 2:
        lo = mesh.vertices[mesh.edges[:, 0]]
        hi = mesh.vertices[mesh.edges[:, 1]]
        for j in range(1, k):
            coords[nv + j - 1:nv + n_edge_dofs:k - 1] = lo + (hi - lo) * (j / k)
        kind[nv:nv + n_edge_dofs] = DOF_EDGE
    if k == 3:
        coords[nv + n_edge_dofs:] = mesh.vertices[mesh.triangles].mean(axis=1)
        kind[nv + n_edge_dofs:] = DOF_INTERIOR

    on_part = {}
    on_boundary = np.zeros(n_dofs, dtype=bool)
    for eid, label in zip(mesh.boundary_edges, mesh.boundary_labels):
        mask = on_part.setdefault(label, np.zeros(n_dofs, dtype=bool))
        a, b = mesh.edges[eid]
        mask[a] = mask[b] = True
        if k >= 2:
            s = nv + eid * (k - 1)
            mask[s:s + k - 1] = True
    for mask in on_part.values():
        on_boundary |= mask

    return DofMap(mesh=mesh, degree=k, n_dofs=n_dofs, cell_dofs=cell_dofs,
                  coords=coords, kind=kind, on_part=on_part,
                  on_boundary=on_boundary)


@dataclass
class FemField:
    """Degree-k Lagrange field: one coefficient per global dof."""
    mesh: object
    dofmap: DofMap
    values: np.ndarray
    solve_residual: float = 0.0

    @property
    def degree(self):
        return self.dofmap.degree

    def local_coeffs(self, t):
        return self.values[self.dofmap.cell_dofs[t]]

    def value_on(self, t, ref_points):
        vals, _ = basis.eval_basis(self.degree, ref_points)
        return vals @ self.local_coeffs(t)

    def grad_on(self, t, ref_points):
        """Physical gradient at reference points of element t, shape (P, 2)."""
        _, grads = basis.eval_basis(self.degree, ref_points)
        _, _, inv, _ = self.mesh.element_maps()
        ref = np.einsum("pnd,n->pd", grads, self.local_coeffs(t))
        return ref @ inv[t]


def local_stiffness(mesh, degree, problem, exactness=None):
    """Per-element stiffness blocks, shape (nt, N, N).

    kappa is sampled at the physical quadrature points; a nonpositive value
    anywhere is an error.
    """
    if exactness is None:
        exactness = default_exactness(degree)
    rule = triangle_rule(exactness)
    _, grads = basis.eval_basis(degree, rule.points)
    v0, jac, inv, det = mesh.element_maps()
    phys = v0[:, None, :] + np.einsum("tab,qb->tqa", jac, rule.points)
    kap = np.asarray(problem.kappa(phys[..., 0], phys[..., 1]), dtype=float)
    kap = np.broadcast_to(kap, phys.shape[:2])
    if not np.all(kap > 0.0):
        t, q = np.unravel_index(int(np.argmin(kap)), kap.shape)
        raise SolverError(
            f"kappa must be positive; got {kap[t, q]:g} at "
            f"({phys[t, q, 0]:.6g}, {phys[t, q, 1]:.6g})")
    g_phys = np.einsum("tba,qib->tqia", inv, grads)
    c = rule.weights[None, :] * det[:, None] * kap
    return np.einsum("tq,tqia,tqja->tij", c, g_phys, g_phys)


def local_load(mesh, degree, problem, exactness=None):
    """Per-element load blocks from the composite subcell rule, shape (nt, N)."""
    if exactness is None:
        exactness = default_exactness(degree)
    pts, w, _ = dualmesh.subcell_quadrature(degree, exactness)
    vals, _ = basis.eval_basis(degree, pts)
    v0, jac, _, det = mesh.element_maps()
    phys = v0[:, None, :] + np.einsum("tab,qb->tqa", jac, pts)
    f = np.asarray(problem.source(phys[..., 0], phys[..., 1]), dtype=float)
    f = np.broadcast_to(f, phys.shape[:2])
    coef = w[None, :] * det[:, None] * f
    return np.einsum("tq,qi->ti", coef, vals)


def subcell_source_integrals(mesh, degree, problem, exactness=None):
    """Integral of f over every subcell polygonal, shape (nt, N).

    Uses the same composite rule as local_load, so summing over local nodes
    reproduces the element load row sums to rounding.
    """
    if exactness is None:
        exactness = default_exactness(degree)
    pts, w, owner = dualmesh.subcell_quadrature(degree, exactness)
    v0, jac, _, det = mesh.element_maps()
    phys = v0[:, None, :] + np.einsum("tab,qb->tqa", jac, pts)
    f = np.asarray(problem.source(phys[..., 0], phys[..., 1]), dtype=float)
    f = np.broadcast_to(f, phys.shape[:2])
    coef = w[None, :] * det[:, None] * f
    onehot = np.zeros((len(pts), basis.N_NODES[degree]))
    onehot[np.arange(len(pts)), owner] = 1.0
    sums = np.einsum("tq,qi->ti", coef, onehot)
    absolute = np.einsum("tq,qi->ti", np.abs(coef), onehot)
    return sums, absolute


def assemble(mesh, dofmap, problem, exactness=None):
    """Unconstrained global system (A, b) as (csr matrix, vector)."""
    k_loc = local_stiffness(mesh, dofmap.degree, problem, exactness)
    b_loc = local_load(mesh, dofmap.degree, problem, exactness)
    n = basis.N_NODES[dofmap.degree]
    rows = np.repeat(dofmap.cell_dofs, n, axis=1).ravel()
    cols = np.tile(dofmap.cell_dofs, (1, n)).ravel()
    a_glob = sp.coo_matrix((k_loc.ravel(), (rows, cols)),
                           shape=(dofmap.n_dofs, dofmap.n_dofs)).tocsr()
    b_glob = np.zeros(dofmap.n_dofs)
    np.add.at(b_glob, dofmap.cell_dofs.ravel(), b_loc.ravel())
    return a_glob, b_glob


@dataclass
class ConstrainedSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    mesh: object
    dofmap: DofMap
    dirichlet_mask: np.ndarray
    dirichlet_values: np.ndarray


def apply_dirichlet(a_glob, b_glob, dofmap, problem):
    """Impose Dirichlet data by row/column elimination.

    Constrained rows become identity rows carrying the nodal trace of g;
    their column contributions move to the right-hand side, so the matrix
    stays symmetric. Boundary parts missing from the problem's Dirichlet
    map are homogeneous Neumann and contribute nothing.
    """
    unknown = set(problem.dirichlet) - dofmap.boundary_parts
    if unknown:
        raise SolverError(
            f"Dirichlet data given for unlabeled boundary part(s) "
            f"{sorted(unknown)}; mesh has {sorted(dofmap.boundary_parts)}")
    mask = np.zeros(dofmap.n_dofs, dtype=bool)
    g = np.zeros(dofmap.n_dofs)
    for part in sorted(problem.dirichlet):
        pm = dofmap.on_part[part]
        mask |= pm
        x, y = dofmap.coords[pm, 0], dofmap.coords[pm, 1]
        g[pm] = np.broadcast_to(np.asarray(problem.dirichlet[part](x, y),
                                           dtype=float), x.shape)
    b_c = b_glob - a_glob @ g
    b_c[mask] = g[mask]
    keep = sp.diags((~mask).astype(float))
    a_c = (keep @ a_glob @ keep + sp.diags(mask.astype(float))).tocsr()
    return ConstrainedSystem(matrix=a_c, rhs=b_c, mesh=dofmap.mesh,
                             dofmap=dofmap, dirichlet_mask=mask,
                             dirichlet_values=g)


def solve(system, rtol=1e-10):
    """Direct sparse solve with a conjugate-gradient fallback.

    The relative residual of the returned solution is at most `rtol`;
    otherwise a SolverError reports the residual that was attained.
    """
    a = system.matrix.tocsc()
    b = system.rhs
    bnorm = np.linalg.norm(b)
    scale = bnorm if bnorm > 0 else 1.0

    def residual(x):
        return float(np.linalg.norm(a @ x - b) / scale)

    x = spla.spsolve(a, b)
    res = residual(x)
    if not np.isfinite(res) or res > rtol:
        x_cg, info = spla.cg(a, b, x0=None, rtol=min(rtol, 1e-12), atol=0.0,
                             maxiter=20 * a.shape[0])
        res_cg = residual(x_cg)
        if info == 0 and (not np.isfinite(res) or res_cg < res):
            x, res = x_cg, res_cg
    if not np.isfinite(res) or res > rtol:
        raise SolverError(f"linear solve did not converge: relative residual "
                          f"{res:.3e} exceeds {rtol:.1e}")
    return FemField(mesh=system.mesh, dofmap=system.dofmap, values=x,
                    solve_residual=res)


def solve_problem(mesh, degree, problem, exactness=None, rtol=1e-10):
    """Build the dof map, assemble, constrain, and solve in one call."""
    dofmap = build_dof_map(mesh, degree)
    a_glob, b_glob = assemble(mesh, dofmap, problem, exactness)
    system = apply_dirichlet(a_glob, b_glob, dofmap, problem)
    return solve(system, rtol)


def export_solution_csv(field, path):
    """Write the solution as "dof_index,x,y,value" rows."""
    dm = field.dofmap
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dof_index", "x", "y", "value"])
        for i in range(dm.n_dofs):
            writer.writerow([i, repr(float(dm.coords[i, 0])),
                             repr(float(dm.coords[i, 1])),
                             repr(float(field.values[i]))])
