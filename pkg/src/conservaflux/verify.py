"""Conservation and accuracy metrics.

The conservation defect of a discrete flux on the control volume of dof xi
is the boundary flux integral minus the enclosed source integral,

    lce(xi) = int_{dC(xi)} (-kappa grad u).n dl - int_{C(xi)} f dx,

reported for geometrically interior dofs, whose control-volume boundaries
consist purely of dual segments. Accuracy is measured in the H1 semi-norm,
and convergence rates are least-squares slopes of log error against log h.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import basis, dualmesh, solver
from .postprocess import (control_volume_flux, get_context, local_coefficients,
                          postprocess_all)
from .quadrature import triangle_rule

_EXACT_FLOOR = 1e-11


@dataclass
class LceReport:
    """Per-dof conservation defects for one discrete field.

    Rows follow the global dof order (vertices, then edge dofs, then
    interior dofs) restricted to geometrically interior dofs.
    """
    field_name: str
    dof_ids: np.ndarray
    kinds: np.ndarray
    coords: np.ndarray
    values: np.ndarray

    @property
    def max_abs(self):
        return float(np.abs(self.values).max()) if len(self.values) else 0.0

    @property
    def mean_abs(self):
        return float(np.abs(self.values).mean()) if len(self.values) else 0.0


def compute_lce(mesh, cv_index, partitions, field, problem,
                exactness=None, seg_points=None, field_name=None):
    """Control-volume conservation defects of a discrete field.

    The flux on each dual segment is the field's own one-sided gradient in
    the element that owns the segment (dual segments never cross facets),
    integrated with the same segment rule the flux recovery uses.
    """
    dualmesh._as_geometry(mesh, partitions, field.dofmap.degree)  # validate
    ctx = get_context(mesh, field.dofmap, problem, exactness, seg_points)
    coeffs = local_coefficients(field)
    s_cv = control_volume_flux(ctx, coeffs)
    contrib = s_cv - ctx.f_sub

    dm = field.dofmap
    lce = np.zeros(dm.n_dofs)
    np.add.at(lce, dm.cell_dofs.ravel(), contrib.ravel())
    if cv_index.n_dofs != dm.n_dofs:
        raise ValueError("control-volume index does not match the dof map")

    interior = np.nonzero(~dm.on_boundary)[0]
    if field_name is None:
        field_name = "tilde" if hasattr(field, "boundary_flux") else "uh"
    return LceReport(field_name=field_name, dof_ids=interior,
                     kinds=dm.kind[interior], coords=dm.coords[interior],
                     values=lce[interior])


def h1_seminorm_error(mesh, field, exact_grad, exactness=None):
    """H1 semi-norm distance to a known gradient, by elementwise quadrature."""
    k = field.degree
    if exactness is None:
        exactness = solver.default_exactness(k)
    rule = triangle_rule(exactness)
    _, grads = basis.eval_basis(k, rule.points)
    v0, jac, inv, det = mesh.element_maps()
    coeffs = local_coefficients(field)
    g_ref = np.einsum("tn,qnd->tqd", coeffs, grads)
    g_phys = np.einsum("tqd,tda->tqa", g_ref, inv)
    phys = v0[:, None, :] + np.einsum("tab,qb->tqa", jac, rule.points)
    gx, gy = exact_grad(phys[..., 0], phys[..., 1])
    gx = np.broadcast_to(np.asarray(gx, dtype=float), phys.shape[:2])
    gy = np.broadcast_to(np.asarray(gy, dtype=float), phys.shape[:2])
    dx = gx - g_phys[..., 0]
    dy = gy - g_phys[..., 1]
    cell = np.einsum("q,t,tq->", rule.weights, det, dx * dx + dy * dy)
    return float(np.sqrt(cell))


def h1_seminorm_diff(mesh, field_a, field_b, exactness=None):
    """H1 semi-norm of the difference of two fields on the same mesh/degree.

    Elementwise additive constants (the recovery gauge) do not register.
    """
    if field_a.degree != field_b.degree:
        raise ValueError("fields have different degrees")
    k = field_a.degree
    if exactness is None:
        exactness = solver.default_exactness(k)
    rule = triangle_rule(exactness)
    _, grads = basis.eval_basis(k, rule.points)
    _, _, inv, det = mesh.element_maps()
    d_loc = local_coefficients(field_a) - local_coefficients(field_b)
    g_ref = np.einsum("tn,qnd->tqd", d_loc, grads)
    g_phys = np.einsum("tqd,tda->tqa", g_ref, inv)
    cell = np.einsum("q,t,tqa->", rule.weights, det, g_phys * g_phys)
    return float(np.sqrt(cell))


@dataclass
class ElementalConservationReport:
    """Per-element balance of the recovered boundary flux against the source."""
    residuals: np.ndarray
    scales: np.ndarray

    @property
    def max_residual(self):
        return float(self.residuals.max())

    @property
    def max_relative(self):
        return float((self.residuals / self.scales).max())


def elemental_conservation_report(mesh, partitions, field, problem,
                                  exactness=None):
    """Conservation residual of the recovered flux on every element.

    The recovered flux through an element's boundary is the sum of the
    per-subcell boundary data carried by the postprocessed field; the
    residual is its mismatch against the element source integral. Scales
    are max(1, |flux data| + |f| integral) for relative comparisons.
    """
    if not hasattr(field, "boundary_flux"):
        raise TypeError("elemental conservation is defined for the "
                        "postprocessed field")
    dualmesh._as_geometry(mesh, partitions, field.dofmap.degree)  # validate
    f_sub, f_abs = solver.subcell_source_integrals(mesh, field.degree, problem,
                                                   exactness)
    residuals = np.abs(field.boundary_flux.sum(axis=1) - f_sub.sum(axis=1))
    scales = np.maximum(1.0, np.abs(field.boundary_flux).sum(axis=1)
                        + f_abs.sum(axis=1))
    return ElementalConservationReport(residuals=residuals, scales=scales)


def f_l1_norm(mesh, degree, problem, exactness=None):
    """L1 norm of the source over the domain (composite subcell rule)."""
    _, f_abs = solver.subcell_source_integrals(mesh, degree, problem, exactness)
    return float(f_abs.sum())


def true_solution_residual(mesh, degree, problem, exactness=None,
                           seg_points=None):
    """Defect of the exact solution in the elemental recovery equations.

    Substitutes the exact gradient for both the unknown and the facet data
    (the exact flux is continuous, so no averaging is involved) and returns,
    per element and basis function, how far the balance

        flux through dual segments = source + stiffness + boundary data

    is from holding. With smooth data this is pure quadrature error.
    """
    if problem.exact_grad is None:
        raise ValueError("true-solution residual requires the exact gradient")
    dofmap = solver.build_dof_map(mesh, degree)
    ctx = get_context(mesh, dofmap, problem, exactness, seg_points)

    def exact_grad_at(phys):
        gx, gy = problem.exact_grad(phys[..., 0], phys[..., 1])
        g = np.empty(phys.shape)
        g[..., 0] = np.broadcast_to(np.asarray(gx, dtype=float),
                                    phys.shape[:-1])
        g[..., 1] = np.broadcast_to(np.asarray(gy, dtype=float),
                                    phys.shape[:-1])
        return g

    # Dual-segment flux rows of the exact field.
    g_cv = exact_grad_at(ctx.xp_cv)                             # (nt, S, ns, 2)
    q_cv = ctx.kap_cv * np.einsum("tsia,tsa->tsi", g_cv, ctx.rotd_cv)
    q_seg = np.einsum("tsi,i->ts", q_cv, ctx.sw)
    b_rows = np.einsum("xs,ts->tx", ctx.sgn_cv, q_seg)

    # Stiffness rows with the exact gradient.
    rule = triangle_rule(ctx.exactness)
    _, grads = basis.eval_basis(degree, rule.points)
    v0, jac, inv, det = mesh.element_maps()
    phys = v0[:, None, :] + np.einsum("tab,qb->tqa", jac, rule.points)
    g_ex = exact_grad_at(phys)
    kap = np.asarray(problem.kappa(phys[..., 0], phys[..., 1]), dtype=float)
    kap = np.broadcast_to(kap, phys.shape[:2])
    g_phi = np.einsum("tba,qib->tqia", inv, grads)
    c = rule.weights[None, :] * det[:, None] * kap
    a_rows = np.einsum("tq,tqa,tqia->ti", c, g_ex, g_phi)

    # Boundary data rows with the exact (one-sided) flux.
    g_bd = exact_grad_at(ctx.xp_bd)                             # (nt, B, nsb, 2)
    q_bd = ctx.kap_bd * np.einsum("tsia,tsa->tsi", g_bd, ctx.rotd_bd)
    q_bseg = np.einsum("tsi,i->ts", q_bd, ctx.sw)
    e_char = np.einsum("xs,ts->tx", ctx.own_bd, q_bseg)
    e_phi = np.einsum("tsi,i,six->tx", q_bd, ctx.sw, ctx.phi_bd)
    e_rows = e_char - e_phi

    ell_rows = ctx.f_sub - ctx.b_loc
    return b_rows - (ell_rows + a_rows + e_rows)


@dataclass
class ConvergenceTable:
    """Mesh-refinement errors and their log-log least-squares slopes."""
    degree: int
    ns: np.ndarray
    hs: np.ndarray
    err_uh: np.ndarray
    err_tilde: np.ndarray
    err_diff: np.ndarray

    def _slope(self, err):
        if err.max() < _EXACT_FLOOR:
            return float("nan")
        return float(np.polyfit(np.log(self.hs), np.log(err), 1)[0])

    @property
    def slope_uh(self):
        return self._slope(self.err_uh)

    @property
    def slope_tilde(self):
        return self._slope(self.err_tilde)

    @property
    def slope_diff(self):
        return self._slope(self.err_diff)

    @property
    def exact(self):
        """True when every error column sits at rounding level."""
        return bool(max(self.err_uh.max(), self.err_tilde.max(),
                        self.err_diff.max()) < _EXACT_FLOOR)


def convergence_study(problem, degree, levels, exactness=None,
                      seg_points=None, threads=None):
    """Solve, recover fluxes, and measure H1 errors over a mesh ladder."""
    from .mesh import build_structured_mesh

    levels = [int(n) for n in levels]
    if len(levels) < 3:
        raise ValueError("a convergence study needs at least 3 mesh levels")
    if problem.exact_grad is None:
        raise ValueError("convergence study requires the exact gradient")
    ns, hs, err_uh, err_tilde, err_diff = [], [], [], [], []
    for n in levels:
        mesh = build_structured_mesh(n)
        u_h = solver.solve_problem(mesh, degree, problem, exactness)
        parts = dualmesh.build_partitions(mesh, degree)
        tilde = postprocess_all(mesh, u_h.dofmap, parts, u_h, problem,
                                threads=threads, exactness=exactness,
                                seg_points=seg_points)
        ns.append(n)
        hs.append(mesh.h)
        err_uh.append(h1_seminorm_error(mesh, u_h, problem.exact_grad,
                                        exactness))
        err_tilde.append(h1_seminorm_error(mesh, tilde, problem.exact_grad,
                                           exactness))
        err_diff.append(h1_seminorm_diff(mesh, u_h, tilde, exactness))
    return ConvergenceTable(degree=degree, ns=np.array(ns),
                            hs=np.array(hs), err_uh=np.array(err_uh),
                            err_tilde=np.array(err_tilde),
                            err_diff=np.array(err_diff))


def write_lce_csv(report, path):
    """Rows "dof_index,class,x,y,lce"."""
    kind_names = {0: "vertex", 1: "edge", 2: "interior"}
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dof_index", "class", "x", "y", "lce"])
        for i in range(len(report.dof_ids)):
            writer.writerow([
                int(report.dof_ids[i]),
                kind_names[int(report.kinds[i])],
                repr(float(report.coords[i, 0])),
                repr(float(report.coords[i, 1])),
                repr(float(report.values[i])),
            ])


def write_convergence_csv(table, path):
    """Rows "n,h,err_uh,err_tilde,err_diff"."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n", "h", "err_uh", "err_tilde", "err_diff"])
        for i in range(len(table.ns)):
            writer.writerow([
                int(table.ns[i]),
                repr(float(table.hs[i])),
                repr(float(table.err_uh[i])),
                repr(float(table.err_tilde[i])),
                repr(float(table.err_diff[i])),
            ])
